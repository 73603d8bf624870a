"""Dense tensors with reverse-mode automatic differentiation.

Only what the joint CFA/demosaicer model needs: same-padded 2-D convolution
over channels-last arrays, ReLU, elementwise add/mul, MSE, channel softmax,
and a custom-gradient hook used for the straight-through estimator.

Images are ``H x W x C`` (or ``B x H x W x C`` batches); convolution kernels
are ``k x k x Cin x Cout``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

DEFAULT_DTYPE = np.float32
MAX_RANK = 4

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build plain tensors inside the block; nothing is recorded for backward."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self):
        return tsum(self)


def _as_tensor(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def make_node(value, parents: Sequence[Tensor], backward_fn, op=""):
    """Wrap ``value`` as the output of an op over ``parents``.

    ``backward_fn(upstream)`` must return one gradient (or None) per parent.
    """
    out = Tensor(value, dtype=np.asarray(value).dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _topo_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Repeated calls add up; call ``zero_grad`` on parameters between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"op {node._op!r} produced gradient of shape {pg.shape} "
                    f"for an input of shape {parent.shape}"
                )
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor or a python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        return make_node(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def tsum(x: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw, "sum")


def square_sum(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.asarray(np.sum(xd * xd), dtype=x.dtype), (x,), lambda g: (2.0 * g * xd,), "sqsum")


_relu_trace = None


@contextlib.contextmanager
def trace_relu_signs():
    """Collect the ``input > 0`` pattern of every relu evaluated inside the block."""
    global _relu_trace
    prev, _relu_trace = _relu_trace, []
    try:
        yield _relu_trace
    finally:
        _relu_trace = prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_trace is not None:
        _relu_trace.append(np.packbits(mask).tobytes())
    return make_node(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    _check_same_shape(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size
    value = np.asarray(np.mean(diff * diff, dtype=np.float64), dtype=pred.dtype)

    def bw(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return make_node(value, (pred, target), bw, "mse")


def softmax(x: Tensor, temperature=1.0, axis=-1) -> Tensor:
    """Softmax of ``temperature * x`` along ``axis``."""
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    t = float(temperature)
    z = t * x.data.astype(np.float64)
    z -= z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def bw(g):
        return (t * s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return make_node(s, (x,), bw, "softmax")


def custom_grad(x: Tensor, forward: Callable, backward: Callable, op="custom") -> Tensor:
    """Record ``forward(x)`` and route the reverse pass through ``backward`` verbatim.

    ``backward`` receives the upstream gradient and must return an array
    shaped like ``x``.
    """
    value = np.asarray(forward(x.data))

    def bw(g):
        gx = np.asarray(backward(g))
        if gx.shape != x.shape:
            raise ShapeError(f"custom backward for {op!r} returned shape {gx.shape}, expected {x.shape}")
        return (gx.astype(x.dtype, copy=False),)

    return make_node(value, (x,), bw, op)


# -- convolution --------------------------------------------------------------

def _im2col(xp, k, h, w):
    """Rows are output pixels; columns are ordered (ky, kx, channel)."""
    b, c = xp.shape[0], xp.shape[-1]
    if k == 1:
        return xp.reshape(b * h * w, c)
    view = sliding_window_view(xp, (k, k), axis=(1, 2))  # b, h, w, c, ky, kx
    return view.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * c)


def _pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size, zero-padded cross-correlation (no kernel flip).

    ``x`` is ``H x W x Cin`` or ``B x H x W x Cin``; ``kernels`` is
    ``k x k x Cin x Cout`` with odd ``k``; ``bias`` has shape ``(Cout,)``.
    """
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1] or kernels.shape[0] % 2 == 0:
        raise ShapeError(f"kernels must be k x k x Cin x Cout with odd k, got {kernels.shape}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be HxWxC or BxHxWxC, got {x.shape}")
    k, _, cin, cout = kernels.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"input has {x.shape[-1]} channels but kernels expect {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")

    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    b, h, w, _ = xd.shape
    p = k // 2
    cols = _im2col(_pad_hw(xd, p), k, h, w)
    kmat = kernels.data.reshape(k * k * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    out = out.reshape(b, h, w, cout)
    if not batched:
        out = out[0]

    if not (_grad_enabled and kernels.requires_grad):
        cols = None  # only the kernel gradient needs the unfolded input

    def bw(g):
        g4 = g if batched else g[None]
        g2 = g4.reshape(b * h * w, cout)
        gk = gb = gx = None
        if kernels.requires_grad:
            gk = (cols.T @ g2).reshape(kernels.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            if cout <= cin:
                # correlate the upstream gradient with the flipped, transposed kernel
                kflip = kernels.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
                gx = (_im2col(_pad_hw(g4, p), k, h, w) @ kflip).reshape(b, h, w, cin)
            else:
                dcols = (g2 @ kmat.T).reshape(b, h, w, k, k, cin)
                gxp = np.zeros((b, h + 2 * p, w + 2 * p, cin), dtype=g.dtype)
                for dy in range(k):
                    for dx in range(k):
                        gxp[:, dy:dy + h, dx:dx + w] += dcols[:, :, :, dy, dx]
                gx = gxp[:, p:p + h, p:p + w]
            if not batched:
                gx = gx[0]
        return gx, gk, gb

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_node(out, parents, bw if bias is not None else (lambda g: bw(g)[:2]), "conv2d")


# -- finite-difference verification -------------------------------------------

@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    parameter_count: int
    checked: int = 0
    worst: str = ""
    kinks_skipped: int = 0

    @property
    def ok(self):
        return self.max_rel_err < 1e-3


def _rel_err(a, n, floor):
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(model_fn, params, eps=1e-4, max_entries=None, directions=0, seed=0, floor=1e-8,
               skip_kinks=False, max_skips=None):
    """Compare analytic gradients against central finite differences.

    ``model_fn()`` must rebuild the graph from ``params`` and return a scalar
    tensor. Use float64 parameters; STE nodes have no true gradient and must
    be kept out of ``model_fn``. ``max_entries`` caps the coordinates probed
    per parameter (sampled without replacement); ``directions`` adds that many
    random-direction derivative checks per parameter, which touch every entry.

    With ``skip_kinks`` a probe whose +eps or -eps evaluation flips the sign
    of any relu input is discarded (the central difference straddles a kink
    and is not a derivative estimate); sampled coordinates are replaced by
    fresh ones, up to ``max_skips`` per parameter.
    """
    params = list(params)
    total = int(sum(p.size for p in params))
    if total == 0:
        return GradCheckReport(0.0, 0.0, 0)
    for p in params:
        p.zero_grad()
    model_fn().backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]

    def loss_at():
        with no_grad(), trace_relu_signs() as trace:
            value = float(model_fn().data)
        return value, trace

    base_signs = loss_at()[1]
    rng = np.random.default_rng(seed)
    max_abs = max_rel = 0.0
    worst = ""
    checked = skipped = 0

    def probe(set_plus, set_minus, restore):
        set_plus()
        up, s_up = loss_at()
        set_minus()
        down, s_down = loss_at()
        restore()
        if skip_kinks and (s_up != base_signs or s_down != base_signs):
            return None
        return (up - down) / (2 * eps)

    def record(ana, num, label):
        nonlocal max_abs, max_rel, worst, checked
        checked += 1
        max_abs = max(max_abs, abs(ana - num))
        rel = _rel_err(ana, num, floor)
        if rel > max_rel:
            max_rel, worst = rel, label

    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        ga = analytic[pi].reshape(-1)
        sampled = max_entries is not None and max_entries < flat.size
        queue = list(rng.permutation(flat.size)) if sampled else list(range(flat.size))
        want = max_entries if sampled else flat.size
        budget = max_skips if max_skips is not None else want
        done = skips = 0
        while done < want and queue:
            i = queue.pop(0)
            orig = flat[i]

            def set_to(v, i=i):
                flat[i] = v

            num = probe(lambda: set_to(orig + eps), lambda: set_to(orig - eps), lambda: set_to(orig))
            if num is None:
                skips += 1
                skipped += 1
                if not sampled or skips > budget:
                    done += 1
                continue
            record(ga[i], num, f"{p.name or pi}[{int(i)}]")
            done += 1
        for d in range(directions):
            v = rng.standard_normal(p.shape)
            base = p.data.copy()

            def shift(sign):
                p.data[...] = base + sign * eps * v

            num = probe(lambda: shift(1), lambda: shift(-1), lambda: shift(0))
            if num is None:
                skipped += 1
                continue
            record(float(np.sum(analytic[pi] * v)), num, f"{p.name or pi}<dir{d}>")
    for p in params:
        p.zero_grad()
    return GradCheckReport(max_abs, max_rel, total, checked, worst, skipped)
