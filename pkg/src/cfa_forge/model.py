"""The joint model: a CFA module feeding the demosaicer."""

from __future__ import annotations

import numpy as np

from . import demosaicer as dm
from .cfa import ColorConfig, color_config, synthesize_channels
from .tensor import Tensor, no_grad


class JointModel:
    def __init__(self, cfa, demosaicer: dm.DemosaicerParams, config: ColorConfig):
        self.cfa = cfa
        self.demosaicer = demosaicer
        self.config = color_config(config)
        if demosaicer.in_channels != cfa.demosaic_channels:
            raise ValueError(
                f"demosaicer takes {demosaicer.in_channels} channels but the CFA emits {cfa.demosaic_channels}"
            )

    def parameters(self):
        out = dict(self.cfa.parameters())
        out.update({"demosaicer." + k: v for k, v in self.demosaicer.named_parameters().items()})
        return out

    def stages(self, rgb) -> dm.StageOutputs:
        """All five stage outputs for an RGB batch (``B x h x w x 3``) or single patch."""
        x = Tensor(synthesize_channels(np.asarray(rgb, dtype=np.float32), self.config))
        return dm.forward(self.cfa.apply(x), self.demosaicer)

    def loss(self, rgb):
        label = Tensor(np.asarray(rgb, dtype=np.float32))
        return dm.total_loss(self.stages(label.data), label, self.demosaicer)

    def predict(self, rgb, batch=64):
        """Final-stage reconstructions clamped to [0, 1], without recording a graph."""
        rgb = np.asarray(rgb, dtype=np.float32)
        single = rgb.ndim == 3
        if single:
            rgb = rgb[None]
        outs = []
        with no_grad():
            for i in range(0, rgb.shape[0], batch):
                outs.append(self.stages(rgb[i:i + batch]).final.data)
        out = np.clip(np.concatenate(outs), 0.0, 1.0)
        return out[0] if single else out
