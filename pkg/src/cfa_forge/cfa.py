"""Color filter arrays: color configurations, fixed patterns, learnable CFAs, mosaicking.

A mosaic is kept as a sparse C-channel image: every pixel holds its observed
channel value and zeros elsewhere.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import PatternError, ShapeError
from .tensor import Tensor, custom_grad, make_node, softmax

LEGEND = {"R": (255, 0, 0), "G": (0, 255, 0), "B": (0, 0, 255), "W": (255, 255, 255)}
FIXED_PATTERNS = ("bayer", "lukac", "rgbw", "cfz")

# W is synthesized from RGB; the rule is stamped into run metadata.
W_CHANNEL_RULE = "W=(R+G+B)/3"


@dataclass(frozen=True)
class ColorConfig:
    name: str
    labels: tuple

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate channel labels in {self.labels}")

    @property
    def channels(self):
        return len(self.labels)

    def index(self, letter):
        try:
            return self.labels.index(letter)
        except ValueError:
            raise PatternError(f"channel {letter!r} is not part of the {self.name} configuration") from None


RGB = ColorConfig("RGB", ("R", "G", "B"))
RGBW = ColorConfig("RGBW", ("R", "G", "B", "W"))


def color_config(name) -> ColorConfig:
    if isinstance(name, ColorConfig):
        return name
    key = str(name).upper()
    if key == "RGB":
        return RGB
    if key == "RGBW":
        return RGBW
    raise ValueError(f"unknown color configuration {name!r} (expected rgb or rgbw)")


@dataclass(frozen=True, eq=False)
class CfaMask:
    """Per-pixel selected channel index, ``h x w`` (square for base patterns)."""

    selection: np.ndarray
    config: ColorConfig = RGB

    def __post_init__(self):
        sel = np.asarray(self.selection)
        if sel.ndim != 2 or sel.size == 0:
            raise ShapeError(f"CFA selection must be a non-empty 2-D array, got shape {sel.shape}")
        if sel.min() < 0 or sel.max() >= self.config.channels:
            raise PatternError(f"selection indices must lie in [0, {self.config.channels})")
        sel = sel.astype(np.int64)
        sel.setflags(write=False)
        object.__setattr__(self, "selection", sel)

    @property
    def shape(self):
        return self.selection.shape

    @property
    def size(self):
        return self.selection.shape[0]

    def one_hot(self, dtype=np.float32):
        return np.eye(self.config.channels, dtype=dtype)[self.selection]

    def letters(self):
        return ["".join(self.config.labels[c] for c in row) for row in self.selection]

    def to_text(self):
        return "\n".join(self.letters()) + "\n"

    def counts(self):
        return {lab: int(np.sum(self.selection == i)) for i, lab in enumerate(self.config.labels)}

    def __eq__(self, other):
        if not isinstance(other, CfaMask):
            return NotImplemented
        return self.config == other.config and np.array_equal(self.selection, other.selection)

    def __hash__(self):
        return hash((self.config, self.selection.tobytes(), self.selection.shape))


def parse_pattern(text, config=RGB) -> CfaMask:
    """Parse the pattern text format: one row per line, one letter per cell."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cells = line.replace(" ", "").replace("\t", "").upper()
        for ch in cells:
            if ch not in LEGEND:
                raise PatternError(f"line {lineno}: unknown channel letter {ch!r}")
        rows.append([config.index(ch) for ch in cells])
    if not rows:
        raise PatternError("pattern has no rows")
    if len({len(r) for r in rows}) != 1:
        raise PatternError("pattern rows have different lengths")
    return CfaMask(np.array(rows), config)


def load_pattern(path, config=RGB) -> CfaMask:
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise PatternError(f"{path}: not a text pattern file") from exc
    return parse_pattern(text, config)


def fixed_cfa(name, config=None) -> CfaMask:
    """Built-in pattern by name (bayer, lukac, rgbw, cfz) or a pattern file path.

    The color configuration defaults to RGBW for patterns containing W.
    """
    key = str(name).lower()
    if key in FIXED_PATTERNS:
        text = resources.files("cfa_forge.patterns").joinpath(f"{key}.txt").read_text()
    else:
        path = Path(name)
        if not path.is_file():
            raise PatternError(f"unknown CFA {name!r}; expected one of {FIXED_PATTERNS} or a pattern file")
        text = path.read_text()
    if config is None:
        body = "".join(l for l in text.splitlines() if not l.strip().startswith("#"))
        config = RGBW if "W" in body.upper() else RGB
    return parse_pattern(text, color_config(config))


def _tile_index(n, period):
    return np.arange(n) % period


def tile_mask(mask: CfaMask, h, w) -> CfaMask:
    """Periodic wrap-around tiling: cell (i, j) takes base(i mod M, j mod M)."""
    if h < 1 or w < 1:
        raise ValueError("tile size must be positive")
    mh, mw = mask.shape
    sel = mask.selection[np.ix_(_tile_index(h, mh), _tile_index(w, mw))]
    return CfaMask(sel, mask.config)


def tile(t: Tensor, h, w) -> Tensor:
    """Differentiable periodic tiling of an ``M x M x C`` (or ``M x M``) tensor to ``h x w``."""
    mh, mw = t.shape[:2]
    rows, cols = _tile_index(h, mh), _tile_index(w, mw)
    out = t.data[np.ix_(rows, cols)]

    def bw(g):
        gp = np.zeros(((h + mh - 1) // mh * mh, (w + mw - 1) // mw * mw) + t.shape[2:], dtype=g.dtype)
        gp[:h, :w] = g
        folded = gp.reshape((gp.shape[0] // mh, mh, gp.shape[1] // mw, mw) + t.shape[2:])
        return (folded.sum(axis=(0, 2)),)

    return make_node(out, (t,), bw, "tile")


def synthesize_channels(rgb, config=RGB):
    """Append the synthetic W channel for RGBW; RGB passes through untouched."""
    config = color_config(config)
    data = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
    if data.shape[-1] != 3:
        raise ShapeError(f"expected 3 color channels, got shape {data.shape}")
    if config.channels == 3:
        out = data
    else:
        w = (data[..., 0:1] + data[..., 1:2] + data[..., 2:3]) / data.dtype.type(3)
        out = np.concatenate([data, w], axis=-1)
    return Tensor(out) if isinstance(rgb, Tensor) else out


def mosaic(patch: Tensor, mask) -> Tensor:
    """Keep each pixel's selected channel and zero the rest.

    ``patch`` is ``h x w x C`` or ``B x h x w x C``; ``mask`` is a ``CfaMask``
    already tiled to ``h x w`` or an ``h x w x C`` tensor (learned, possibly soft).
    """
    if isinstance(mask, CfaMask):
        m = Tensor(mask.one_hot(patch.dtype))
    else:
        m = mask
    if m.shape != patch.shape[-3:]:
        raise ShapeError(f"mask shape {m.shape} does not match patch {patch.shape}")
    pd, md = patch.data, m.data
    batched = patch.ndim == 4

    def bw(g):
        gm = g * pd
        if batched:
            gm = gm.sum(axis=0)
        return g * md, gm

    return make_node(pd * md, (patch, m), bw, "mosaic")


def hardmax_mask(scores: Tensor) -> Tensor:
    """One-hot argmax over the channel axis with a straight-through gradient.

    Ties go to the lowest channel index. The upstream gradient reaches only the
    selected score of each pixel, unchanged.
    """

    def fwd(s):
        return np.eye(s.shape[-1], dtype=s.dtype)[np.argmax(s, axis=-1)]

    onehot = fwd(scores.data)
    return custom_grad(scores, lambda s: onehot, lambda g: g * onehot, op="hardmax")


def argmax_mask(scores, config) -> CfaMask:
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    return CfaMask(np.argmax(data, axis=-1), config)


# -- CFA modules used by the joint model ---------------------------------------

class FixedCfa:
    kind = "fixed"

    def __init__(self, mask: CfaMask, name="custom"):
        self.base = mask
        self.config = mask.config
        self.name = name

    @property
    def demosaic_channels(self):
        return self.config.channels

    def parameters(self):
        return {}

    def mask(self) -> CfaMask:
        return self.base

    def apply(self, x: Tensor) -> Tensor:
        h, w = x.shape[-3:-1]
        return mosaic(x, tile_mask(self.base, h, w))

    def after_step(self):
        pass

    def end_epoch(self):
        return self


class HardMaxCfa:
    """Learnable binary CFA: argmax selection with a straight-through gradient."""

    kind = "hardmax"

    def __init__(self, size, config=RGB, rng=None, scores=None):
        self.config = color_config(config)
        if scores is None:
            rng = np.random.default_rng(rng)
            scores = rng.uniform(0.0, 1.0, size=(size, size, self.config.channels))
        self.scores = Tensor(np.asarray(scores, dtype=np.float32), requires_grad=True, name="cfa.scores")
        if self.scores.shape != (size, size, self.config.channels):
            raise ShapeError(f"scores shape {self.scores.shape} does not match size {size} / {self.config.name}")

    @property
    def size(self):
        return self.scores.shape[0]

    @property
    def demosaic_channels(self):
        return self.config.channels

    def parameters(self):
        return {"cfa.scores": self.scores}

    def mask(self) -> CfaMask:
        return argmax_mask(self.scores, self.config)

    def apply(self, x: Tensor) -> Tensor:
        h, w = x.shape[-3:-1]
        return mosaic(x, tile(hardmax_mask(self.scores), h, w))

    def after_step(self):
        pass

    def end_epoch(self):
        return self


@dataclass
class SoftmaxCfa:
    """Weighted-softmax comparator: soft channel selection sharpened by ``alpha``."""

    scores: Tensor
    alpha: float = 1.0
    growth: float = 1.2
    config: ColorConfig = RGB
    kind: str = field(default="softmax", init=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.growth < 1:
            raise ValueError("growth must be >= 1")

    @classmethod
    def init(cls, size, config=RGB, rng=None, alpha=1.0, growth=1.2):
        config = color_config(config)
        rng = np.random.default_rng(rng)
        s = rng.uniform(0.0, 1.0, size=(size, size, config.channels)).astype(np.float32)
        return cls(Tensor(s, requires_grad=True, name="cfa.scores"), alpha, growth, config)

    @property
    def size(self):
        return self.scores.shape[0]

    @property
    def demosaic_channels(self):
        return self.config.channels

    def parameters(self):
        return {"cfa.scores": self.scores}

    def soft_mask(self) -> Tensor:
        return softmax_mask(self)

    def mask(self) -> CfaMask:
        return argmax_mask(self.scores, self.config)

    def apply(self, x: Tensor) -> Tensor:
        h, w = x.shape[-3:-1]
        return mosaic(x, tile(softmax_mask(self), h, w))

    def after_step(self):
        pass

    def end_epoch(self):
        return softmax_anneal(self)


def softmax_mask(state: SoftmaxCfa) -> Tensor:
    return softmax(state.scores, temperature=state.alpha, axis=-1)


def softmax_anneal(state: SoftmaxCfa) -> SoftmaxCfa:
    """One epoch of temperature growth: alpha <- alpha * growth."""
    return dataclasses.replace(state, alpha=state.alpha * state.growth)


class LinearCfa:
    """Unconstrained comparator: per-pixel non-negative channel weights plus bias.

    Produces a single-channel measurement per pixel.
    """

    kind = "linear"

    def __init__(self, size, config=RGB, rng=None, weights=None, bias=None):
        self.config = color_config(config)
        c = self.config.channels
        if weights is None:
            weights = np.random.default_rng(rng).uniform(0.0, 1.0, size=(size, size, c))
        if bias is None:
            bias = np.zeros((size, size))
        self.weights = Tensor(np.asarray(weights, dtype=np.float32), requires_grad=True, name="cfa.weights")
        self.bias = Tensor(np.asarray(bias, dtype=np.float32), requires_grad=True, name="cfa.bias")
        if self.weights.shape != (size, size, c) or self.bias.shape != (size, size):
            raise ShapeError("linear CFA weights/bias shapes do not match the CFA size")
        self.after_step()

    @property
    def size(self):
        return self.weights.shape[0]

    @property
    def demosaic_channels(self):
        return 1

    def parameters(self):
        return {"cfa.weights": self.weights, "cfa.bias": self.bias}

    def mask(self) -> CfaMask:
        return argmax_mask(self.weights, self.config)

    def apply(self, x: Tensor) -> Tensor:
        return linear_project(self, x)

    def after_step(self):
        np.maximum(self.weights.data, 0, out=self.weights.data)

    def end_epoch(self):
        return self


def linear_project(state: LinearCfa, patch: Tensor) -> Tensor:
    """Per pixel: dot(weights, colors) + bias, tiled periodically; output ``... x h x w x 1``."""
    h, w, c = patch.shape[-3:]
    if c != state.weights.shape[-1]:
        raise ShapeError(f"patch has {c} channels, linear CFA expects {state.weights.shape[-1]}")
    wt = tile(state.weights, h, w)
    bt = tile(state.bias, h, w)
    pd, wd = patch.data, wt.data
    out = (pd * wd).sum(axis=-1, keepdims=True) + bt.data[..., None]
    batched = patch.ndim == 4

    def bw(g):
        gw = g * pd
        gb = g[..., 0]
        if batched:
            gw, gb = gw.sum(axis=0), gb.sum(axis=0)
        return g * wd, gw, gb

    return make_node(out.astype(patch.dtype), (patch, wt, bt), bw, "linear_project")


def build_cfa(kind, size=8, config=RGB, rng=None, growth=1.2, alpha=1.0):
    """Construct a CFA module from a kind string: hardmax, softmax, linear, fixed:NAME, file:PATH."""
    config = color_config(config)
    if kind == "hardmax":
        return HardMaxCfa(size, config, rng)
    if kind == "softmax":
        return SoftmaxCfa.init(size, config, rng, alpha=alpha, growth=growth)
    if kind == "linear":
        return LinearCfa(size, config, rng)
    if kind.startswith("fixed:") or kind.startswith("file:"):
        ref = kind.split(":", 1)[1]
        return FixedCfa(fixed_cfa(ref, config), name=ref)
    raise PatternError(f"unknown CFA kind {kind!r}")


def render_mask(mask: CfaMask, cell_px=16) -> np.ndarray:
    """Legend-colored uint8 image, ``cell_px`` pixels per CFA cell."""
    if cell_px < 1:
        raise ValueError("cell_px must be positive")
    lut = np.array([LEGEND[lab] for lab in mask.config.labels], dtype=np.uint8)
    img = lut[mask.selection]
    return np.repeat(np.repeat(img, cell_px, axis=0), cell_px, axis=1)
