"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parent tensors and a closure that pushes gradients back to them. Because
an operation can only consume tensors that already exist, descending creation
order is always a valid reverse-topological order, and that is exactly the
order :func:`backward` replays. Tensors are immutable once produced by an op;
parameter buffers are mutated in place only between passes (optimizer steps).

All forward results are checked for NaN/Inf: a non-finite value raises
instead of propagating silently.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

# Lower clamp applied before every log; KL-style losses evaluate log at
# saturated probabilities where the exact formula is undefined.
LOG_FLOOR = 1e-12

_serial = itertools.count()
_grad_enabled = True

# When set to a one-element list, relu records min |input| seen; gradient
# checks use it to reject sample points too close to the kink.
_relu_margin_probe: list[float] | None = None


def _check_finite(arr: np.ndarray, op: str) -> None:
    # One fast reduction: any NaN/Inf poisons the sum.
    if not np.isfinite(arr.sum()):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_serial")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError("tensors must have positive extents")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._serial = next(_serial)

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...],
                backward: Callable[[np.ndarray], None], op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._serial = next(_serial)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        out.append(node)
        stack.extend(node._parents)
    out.sort(key=lambda t: -t._serial)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Grads of reachable tensors are reset first, so repeated calls on the same
    record are idempotent (and bit-identical).
    """
    if loss.data.shape != ():
        raise ContractError("backward expects a scalar loss")
    if not np.isfinite(loss.data):
        raise NumericError("loss is not finite")
    if not loss.requires_grad:
        return
    nodes = _reachable(loss)
    for node in nodes:
        node.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in nodes:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# binary elementwise ops
#
# Broadcasting is limited to what the models and losses need: equal shapes,
# a scalar against anything, and a bias row (k,) against a batch (n, k).

def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    if len(sa) == 2 and sb == (sa[1],):
        return True
    if len(sb) == 2 and sa == (sb[1],):
        return True
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    return g.sum(axis=0)


def _binary(a: Tensor, b: Tensor, op: str) -> None:
    if not _broadcast_ok(a.data.shape, b.data.shape):
        raise ShapeError(f"{op}: incompatible shapes {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary(a, b, "add")

    def _bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor._result(a.data + b.data, (a, b), _bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary(a, b, "sub")

    def _bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor._result(a.data - b.data, (a, b), _bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary(a, b, "mul")

    def _bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(a.data * b.data, (a, b), _bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary(a, b, "div")
    out = a.data / b.data

    def _bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._result(out, (a, b), _bw, "div")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ "
                         f"({a.data.shape} @ {b.data.shape})")

    def _bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor._result(a.data @ b.data, (a, b), _bw, "matmul")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """3x3 cross-correlation, spatial padding 1, stride 1 or 2.

    ``x`` is (C,H,W) or (N,C,H,W); ``w`` is (K,C,3,3). Output spatial size is
    floor((H + 2*padding - 3)/stride) + 1 per side.
    """
    if stride not in (1, 2):
        raise ShapeError("conv2d stride must be 1 or 2")
    if padding != 1:
        raise ShapeError("conv2d padding is fixed at 1")
    wd = w.data
    if wd.ndim != 4 or wd.shape[2:] != (3, 3):
        raise ShapeError("conv2d kernels must have shape (K, C, 3, 3)")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError("conv2d input must be (C,H,W) or (N,C,H,W)")
    n, c, h, width = xd.shape
    k = wd.shape[0]
    if c == 0 or k == 0 or wd.shape[1] != c:
        raise ShapeError(f"conv2d: channel mismatch or zero-sized channel "
                         f"(input {xd.shape}, kernels {wd.shape})")
    if h < 3 or width < 3:
        raise ShapeError("conv2d input spatial dims must be >= 3")

    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    oh = (h + 2 - 3) // stride + 1
    ow = (width + 2 - 3) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    # im2col in NHWC order so the GEMM and the scatter below stay contiguous
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * 9)
    wmat = wd.reshape(k, c * 9)
    out = (cols @ wmat.T).reshape(n, oh, ow, k).transpose(0, 3, 1, 2)

    def _bw(g):
        g4 = g if g.ndim == 4 else g[None]
        gmat = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(n * oh * ow, k)
        if w.requires_grad:
            _accum(w, (gmat.T @ cols).reshape(k, c, 3, 3))
        if x.requires_grad:
            gwin = (gmat @ wmat).reshape(n, oh, ow, c * 9)
            gxp = np.zeros((n, h + 2, width + 2, c))
            hi = stride * (oh - 1) + 1
            wi = stride * (ow - 1) + 1
            for di in range(3):
                for dj in range(3):
                    patch = gwin[:, :, :, (di * 3 + dj)::9]
                    gxp[:, di:di + hi:stride, dj:dj + wi:stride, :] += patch
            gx = gxp[:, 1:1 + h, 1:1 + width, :].transpose(0, 3, 1, 2)
            _accum(x, gx[0] if squeeze else gx)

    return Tensor._result(out[0] if squeeze else out, (x, w), _bw, "conv2d")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (C,) to conv activations (C,H,W) or (N,C,H,W)."""
    if x.data.ndim not in (3, 4) or b.data.ndim != 1:
        raise ShapeError("add_channel_bias expects conv activations and a vector")
    caxis = x.data.ndim - 3
    if x.data.shape[caxis] != b.data.shape[0]:
        raise ShapeError(f"bias length {b.data.shape[0]} does not match "
                         f"{x.data.shape[caxis]} channels")
    view = b.data[:, None, None]

    def _bw(g):
        _accum(x, g)
        axes = (0, 2, 3) if g.ndim == 4 else (1, 2)
        _accum(b, g.sum(axis=axes))

    return Tensor._result(x.data + view, (x, b), _bw, "add_channel_bias")


# ---------------------------------------------------------------------------
# pointwise ops

def relu(x: Tensor) -> Tensor:
    if _relu_margin_probe is not None:
        m = float(np.min(np.abs(x.data)))
        if m < _relu_margin_probe[0]:
            _relu_margin_probe[0] = m
    mask = x.data > 0

    def _bw(g):
        _accum(x, g * mask)

    return Tensor._result(np.maximum(x.data, 0.0), (x,), _bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def _bw(g):
        _accum(x, g * out * (1.0 - out))

    return Tensor._result(out, (x,), _bw, "sigmoid")


def log(x: Tensor) -> Tensor:
    """Natural log of the input clamped to [LOG_FLOOR, inf)."""
    clamped = np.maximum(x.data, LOG_FLOOR)
    live = x.data >= LOG_FLOOR

    def _bw(g):
        _accum(x, g * live / clamped)

    return Tensor._result(np.log(clamped), (x,), _bw, "log")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def _bw(g):
        _accum(x, g * out)

    return Tensor._result(out, (x,), _bw, "exp")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def _bw(g):
        _accum(x, g * c)

    return Tensor._result(x.data * c, (x,), _bw, "scale")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(x.data)

    def _bw(g):
        _accum(x, g * 0.5 / out)

    return Tensor._result(out, (x,), _bw, "sqrt")


# ---------------------------------------------------------------------------
# reductions and reshaping

def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def _bw(g):
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
        return Tensor._result(x.data.sum(), (x,), _bw, "sum")
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {x.data.shape}")

    def _bw(g):
        _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return Tensor._result(x.data.sum(axis=axis), (x,), _bw, "sum")


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.data.size

        def _bw(g):
            _accum(x, np.broadcast_to(g / n, x.data.shape).copy())
        return Tensor._result(x.data.mean(), (x,), _bw, "mean")
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {x.data.shape}")
    n = x.data.shape[axis]

    def _bw(g):
        _accum(x, np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape).copy())

    return Tensor._result(x.data.mean(axis=axis), (x,), _bw, "mean")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    nd = parts[0].data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat: axis {axis} out of range")
    axis = axis % nd
    for p in parts[1:]:
        sa, sb = parts[0].data.shape, p.data.shape
        if len(sa) != len(sb) or any(u != v for i, (u, v) in enumerate(zip(sa, sb)) if i != axis):
            raise ShapeError("concat: shapes differ off the concatenation axis")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * nd
            idx[axis] = slice(start, stop)
            _accum(p, g[tuple(idx)])

    return Tensor._result(np.concatenate([p.data for p in parts], axis=axis),
                          tuple(parts), _bw, "concat")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilised."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(x, out * (g - dot))

    return Tensor._result(out, (x,), _bw, "softmax")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: (...,C,H,W) -> (...,C)."""
    if x.data.ndim not in (3, 4):
        raise ShapeError("global_avg_pool expects (C,H,W) or (N,C,H,W)")
    h, w = x.data.shape[-2:]

    def _bw(g):
        _accum(x, np.broadcast_to(g[..., None, None] / (h * w), x.data.shape).copy())

    return Tensor._result(x.data.mean(axis=(-2, -1)), (x,), _bw, "global_avg_pool")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if shape.count(-1) > 1:
        raise ShapeError("reshape: at most one wildcard dimension")
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or x.data.size % known:
            raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}")
        shape = tuple(x.data.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}")

    def _bw(g):
        _accum(x, g.reshape(x.data.shape))

    return Tensor._result(x.data.reshape(shape), (x,), _bw, "reshape")


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable, xs, eps: float = 1e-5) -> float:
    """Max relative error between analytic grads of ``f`` and central differences.

    ``xs`` is a Tensor or a sequence of Tensors; ``f`` receives it unchanged
    and must return a scalar Tensor. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    single = isinstance(xs, Tensor)
    tensors = [xs] if single else list(xs)
    for t in tensors:
        t.requires_grad = True

    loss = f(xs)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else np.array(t.grad, copy=True)
                for t in tensors]

    worst = 0.0
    for t, ag in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        aflat = ag.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(xs).data)
            flat[i] = orig - eps
            lo = float(f(xs).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    return worst
