"""Multi-stage convolutional demosaicer.

A bias-free 9x9 convolution turns the sparse mosaic into a 3-channel
pseudoimage; three residual refinement blocks (7x7x128, 5x5x64, 3x3x3, each
followed by ReLU) improve it; a last 3x3 convolution with ReLU gives the
reconstruction. The loss supervises all five stage outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, add, conv2d, mse, relu, square_sum

PSEUDO_K = 9
REFINE_LAYERS = ((7, 128), (5, 64), (3, 3))
FINAL_K = 3
N_BLOCKS = 3
DEFAULT_L2 = 1e-5


def glorot_kernel(rng, k, cin, cout, dtype=np.float32):
    s = np.sqrt(6.0 / (k * k * cin + k * k * cout))
    return rng.uniform(-s, s, size=(k, k, cin, cout)).astype(dtype)


@dataclass
class RefineBlock:
    k1: Tensor
    b1: Tensor
    k2: Tensor
    b2: Tensor
    k3: Tensor
    b3: Tensor

    def kernels(self):
        return (self.k1, self.k2, self.k3)

    def tensors(self):
        return (self.k1, self.b1, self.k2, self.b2, self.k3, self.b3)


@dataclass
class DemosaicerParams:
    pseudo: Tensor
    refine: list
    final_k: Tensor
    final_b: Tensor
    l2_coeff: float = DEFAULT_L2
    in_channels: int = field(init=False)

    def __post_init__(self):
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be non-negative")
        self.in_channels = self.pseudo.shape[2]
        self._check_shapes()

    def _check_shapes(self):
        expect = {"pseudo": (PSEUDO_K, PSEUDO_K, self.in_channels, 3), "final.k": (FINAL_K, FINAL_K, 3, 3),
                  "final.b": (3,)}
        cin = 3
        for i in range(len(self.refine)):
            for j, (k, cout) in enumerate(REFINE_LAYERS, 1):
                expect[f"refine{i + 1}.k{j}"] = (k, k, cin, cout)
                expect[f"refine{i + 1}.b{j}"] = (cout,)
                cin = cout
            cin = 3
        for name, t in self.named_parameters().items():
            if t.shape != expect[name]:
                raise ShapeError(f"{name}: expected shape {expect[name]}, got {t.shape}")

    @classmethod
    def init(cls, in_channels=3, rng=None, l2_coeff=DEFAULT_L2, dtype=np.float32):
        """Glorot-uniform kernels, zero biases."""
        rng = np.random.default_rng(rng)
        pseudo = Tensor(glorot_kernel(rng, PSEUDO_K, in_channels, 3, dtype), requires_grad=True)
        blocks = []
        for _ in range(N_BLOCKS):
            tensors, cin = [], 3
            for k, cout in REFINE_LAYERS:
                tensors.append(Tensor(glorot_kernel(rng, k, cin, cout, dtype), requires_grad=True))
                tensors.append(Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))
                cin = cout
            blocks.append(RefineBlock(*tensors))
        final_k = Tensor(glorot_kernel(rng, FINAL_K, 3, 3, dtype), requires_grad=True)
        final_b = Tensor(np.zeros(3, dtype=dtype), requires_grad=True)
        params = cls(pseudo, blocks, final_k, final_b, l2_coeff)
        for name, t in params.named_parameters().items():
            t.name = "demosaicer." + name
        return params

    def named_parameters(self):
        out = {"pseudo": self.pseudo}
        for i, blk in enumerate(self.refine, 1):
            for j, (kt, bt) in enumerate(((blk.k1, blk.b1), (blk.k2, blk.b2), (blk.k3, blk.b3)), 1):
                out[f"refine{i}.k{j}"] = kt
                out[f"refine{i}.b{j}"] = bt
        out["final.k"] = self.final_k
        out["final.b"] = self.final_b
        return out

    def regularized_kernels(self):
        return [k for blk in self.refine for k in blk.kernels()]

    def astype(self, dtype):
        """Independent copy with every tensor cast to ``dtype``."""
        named = {n: Tensor(t.data.astype(dtype), requires_grad=True, name=t.name)
                 for n, t in self.named_parameters().items()}
        return self.from_named(named, self.l2_coeff)

    @classmethod
    def from_named(cls, named, l2_coeff=DEFAULT_L2):
        blocks = []
        i = 1
        while f"refine{i}.k1" in named:
            blocks.append(RefineBlock(*(named[f"refine{i}.{p}{j}"] for j in (1, 2, 3) for p in ("k", "b"))))
            i += 1
        return cls(named["pseudo"], blocks, named["final.k"], named["final.b"], l2_coeff)


class StageOutputs(NamedTuple):
    pseudo: Tensor
    refine1: Tensor
    refine2: Tensor
    refine3: Tensor
    final: Tensor


def refine_block(x: Tensor, blk: RefineBlock) -> Tensor:
    h = relu(conv2d(x, blk.k1, blk.b1))
    h = relu(conv2d(h, blk.k2, blk.b2))
    h = relu(conv2d(h, blk.k3, blk.b3))
    return add(x, h)


def forward(mosaic: Tensor, params: DemosaicerParams) -> StageOutputs:
    """Run the demosaicer on an ``h x w x C`` (or batched) mosaic."""
    if mosaic.shape[-1] != params.in_channels:
        raise ShapeError(f"mosaic has {mosaic.shape[-1]} channels, demosaicer expects {params.in_channels}")
    stages = [conv2d(mosaic, params.pseudo)]
    for blk in params.refine:
        stages.append(refine_block(stages[-1], blk))
    stages.append(relu(conv2d(stages[-1], params.final_k, params.final_b)))
    return StageOutputs(*stages)


def l2_term(params: DemosaicerParams):
    total = None
    for k in params.regularized_kernels():
        s = square_sum(k)
        total = s if total is None else add(total, s)
    return total * params.l2_coeff


def total_loss(outputs, label: Tensor, params: DemosaicerParams) -> Tensor:
    """Sum of per-stage MSEs against ``label`` plus the L2 penalty on refinement kernels.

    MSE is the mean over batch, pixels, and channels.
    """
    loss = None
    for out in outputs:
        if out.shape != label.shape:
            raise ShapeError(f"stage output {out.shape} does not match label {label.shape}")
        term = mse(out, label)
        loss = term if loss is None else add(loss, term)
    if params.l2_coeff:
        loss = add(loss, l2_term(params))
    return loss


def loss_breakdown(outputs, label, params):
    """Float values of each stage MSE and the L2 term, for reporting."""
    terms = [float(np.mean((o.data.astype(np.float64) - label.data) ** 2)) for o in outputs]
    l2 = params.l2_coeff * sum(float(np.sum(k.data.astype(np.float64) ** 2)) for k in params.regularized_kernels())
    return terms, l2


def param_count(params: DemosaicerParams) -> int:
    return int(sum(t.size for t in params.named_parameters().values()))
