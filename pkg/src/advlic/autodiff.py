"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Every primitive records a node holding its parents and a closure that maps the
output gradient to input gradients. ``Tensor.backward`` walks the graph in
reverse topological order exactly once; the graph is released afterwards.

Data is float32. The finite-difference oracle temporarily switches the default
dtype to float64 (see :func:`precision`).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced NaN or Inf")


_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", np.float32)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    old = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    released: bool = False


@dataclass
class Graph:
    """Topologically ordered view of the nodes that produced a tensor."""

    nodes: list[Node] = field(default_factory=list)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def graph(self) -> Graph:
        return Graph(_topo(self))

    def backward(self) -> None:
        if self.data.size != 1:
            raise AutodiffError(f"backward requires a scalar output, got shape {self.shape}")
        if self._node is None:
            if self.requires_grad:
                self.grad = np.ones_like(self.data)
                return
            raise AutodiffError("backward on a tensor that does not require grad")
        if self._node.released:
            raise AutodiffError("backward called twice on the same graph; run a new forward pass")
        tensors = _topo_tensors(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(tensors):
            g = grads.pop(id(t), None)
            node = t._node
            if g is None:
                continue
            if node is None:
                if t.requires_grad:
                    t.grad = g if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for t in tensors:
            if t._node is not None:
                t._node.released = True
                t._node.backward_fn = None


def _not_scalar(t: Tensor):
    raise AutodiffError(f"item() requires a single element, got shape {t.shape}")


def _topo_tensors(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def _topo(root: Tensor) -> list[Node]:
    return [t._node for t in _topo_tensors(root) if t._node is not None]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    slope = a.data.dtype.type(slope)
    factor = np.where(a.data > 0, a.data.dtype.type(1), slope)
    return _make("leaky_relu", a.data * factor, (a,), lambda g: (g * factor,))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _make("clamp", out, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def log2(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log2")
    inv = a.data.dtype.type(1.0 / np.log(2.0))
    return _make("log2", np.log2(a.data), (a,), lambda g: (g * inv / a.data,))


def abs(a: Tensor) -> Tensor:  # noqa: A001
    s = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def sign(a: Tensor) -> Tensor:
    """Elementwise sign with sign(0) == 0. Gradient is zero."""
    return _make("sign", np.sign(a.data), (a,), lambda g: (np.zeros_like(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def normal_cdf(a: Tensor) -> Tensor:
    from scipy.special import ndtr

    x = a.data
    out = ndtr(x).astype(x.dtype)
    pdf = (np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)).astype(x.dtype)
    return _make("normal_cdf", out, (a,), lambda g: (g * pdf,))


def round_ste(a: Tensor) -> Tensor:
    """Round half to even; backward is the identity (straight-through)."""
    return _make("round_ste", np.round(a.data), (a,), lambda g: (g,))


def add_uniform_noise(a: Tensor, rng: np.random.Generator) -> Tensor:
    """Additive U(-0.5, 0.5) noise, the training-time quantization proxy."""
    noise = rng.uniform(-0.5, 0.5, size=a.shape).astype(a.data.dtype)
    return _make("add_uniform_noise", a.data + noise, (a,), lambda g: (g,))


# ---------------------------------------------------------------- reductions


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return _make("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.dtype.type(a.size)
    return _make("mean", np.asarray(a.data.mean(), dtype=a.data.dtype), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def mse(a, b) -> Tensor:
    """Mean of squared differences over every element."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.dtype.type(diff.size)
    out = np.asarray(np.mean(diff * diff), dtype=diff.dtype)

    def backward(g):
        ga = (2 * g / n) * diff
        return ga, -ga

    return _make("mse", out, (a, b), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def crop(a: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` region of an NCHW tensor."""
    if height > a.shape[2] or width > a.shape[3]:
        raise ShapeError("crop", a.shape, (height, width))
    if (height, width) == a.shape[2:]:
        return a

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[:, :, :height, :width] = g
        return (full,)

    return _make("crop", a.data[:, :, :height, :width].copy(), (a,), backward)


# ---------------------------------------------------------------- convolution


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a padded NHWC array as an (N*Ho*Wo, kH*kW*C) matrix."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add (N*Ho*Wo, kH*kW*C) patch gradients back into a padded NHWC array."""
    n, _, _, c = padded_shape
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    return xp


def _nhwc_padded(x: np.ndarray, pad: int) -> np.ndarray:
    t = x.transpose(0, 2, 3, 1)
    if pad:
        return np.pad(t, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    return np.ascontiguousarray(t)


def _wmat(w: np.ndarray) -> np.ndarray:
    # OIHW -> (kH*kW*I, O)
    o, c, kh, kw = w.shape
    return w.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)


def _conv_fwd(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    xp = _nhwc_padded(x, pad)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = (cols @ _wmat(w)).reshape(n, ho, wo, o)
    return out.transpose(0, 3, 1, 2), cols, xp.shape


def _conv_grad_input(g, w, x_shape, padded_shape, stride, pad):
    n, o, ho, wo = g.shape
    kh, kw = w.shape[2:]
    g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    xp = _col2im(g2 @ _wmat(w).T, padded_shape, kh, kw, stride, ho, wo)
    h, wd = x_shape[2:]
    return xp[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2)


def _conv_grad_weight(g, cols, w_shape):
    o, c, kh, kw = w_shape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    return (cols.T @ g2).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with OIHW ``w`` and zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if x.shape[2] + 2 * padding < w.shape[2] or x.shape[3] + 2 * padding < w.shape[3]:
        raise ShapeError("conv2d", x.shape, w.shape)
    out, cols, padded_shape = _conv_fwd(x.data, w.data, stride, padding)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError("conv2d", w.shape, b.shape)
        out = out + b.data[None, :, None, None]
        parents.append(b)
    if not (_grad_enabled() and any(p.requires_grad for p in parents)):
        cols = None

    def backward(g):
        gx = _conv_grad_input(g, w.data, x.shape, padded_shape, stride, padding) if x.requires_grad else None
        gw = _conv_grad_weight(g, cols, w.shape) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make("conv2d", np.ascontiguousarray(out), parents, backward)


def conv_transpose2d(y: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding=0) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``w`` has shape (C_in, C_out, kH, kW), the same tensor a forward conv2d
    from C_out to C_in channels would use.
    """
    y, w = as_tensor(y), as_tensor(w)
    if y.ndim != 4 or w.ndim != 4 or y.shape[1] != w.shape[0]:
        raise ShapeError("conv_transpose2d", y.shape, w.shape)
    oph, opw = _pair(output_padding)
    if not (0 <= oph < stride and 0 <= opw < stride):
        raise ValueError("conv_transpose2d: output_padding must be smaller than stride")
    n, _, hi, wi = y.shape
    kh, kw = w.shape[2:]
    h = (hi - 1) * stride - 2 * padding + kh + oph
    wd = (wi - 1) * stride - 2 * padding + kw + opw
    if h <= 0 or wd <= 0:
        raise ShapeError("conv_transpose2d", y.shape, w.shape)
    x_shape = (n, w.shape[1], h, wd)
    padded_shape = (n, h + 2 * padding, wd + 2 * padding, w.shape[1])
    # rows/cols of the padded output beyond the last window stay zero
    out = _conv_grad_input(y.data, w.data, x_shape, padded_shape, stride, padding)
    parents = [y, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError("conv_transpose2d", w.shape, b.shape)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        cols = _im2col(_nhwc_padded(g, padding), kh, kw, stride, hi, wi)
        gy = (cols @ _wmat(w.data)).reshape(n, hi, wi, -1).transpose(0, 3, 1, 2) \
            if y.requires_grad else None
        gw = _conv_grad_weight(y.data, cols, w.shape) if w.requires_grad else None
        grads = [gy, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make("conv_transpose2d", np.ascontiguousarray(out), parents, backward)


# ---------------------------------------------------------------- verification


def trace(fn: Callable[..., Tensor], *args) -> tuple[Tensor, Graph]:
    """Run ``fn`` and return its output together with the recorded graph."""
    out = fn(*args)
    return out, out.graph()


def input_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, np.ndarray]:
    """Value of scalar ``f`` at ``x`` and its gradient with respect to ``x``."""
    t = Tensor(x, requires_grad=True)
    out = f(t)
    out.backward()
    grad = t.grad if t.grad is not None else np.zeros_like(t.data)
    return out.item(), grad


NON_SMOOTH_OPS = frozenset({"round_ste", "sign"})


@dataclass
class GradCheck:
    max_relative_error: float
    non_smooth_ops: frozenset[str]

    def __float__(self) -> float:
        return self.max_relative_error


def finite_difference_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3,
                            analytic_dtype=np.float64) -> GradCheck:
    """Compare autodiff gradients with float64 central differences.

    The analytic pass runs in ``analytic_dtype`` (double by default, as usual
    for gradient checks; float32 rounding alone can push near-zero gradient
    coordinates past a tight relative tolerance).

    Returns the largest ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``
    over all coordinates of ``x``. Ops whose gradient is defined by convention
    (straight-through rounding, sign) are listed in ``non_smooth_ops``; the error
    for such closures is still reported but is not expected to be small.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    # differentiate numerically at the same (rounded) point the analytic pass sees
    x64 = np.array(x, dtype=np.float64).astype(analytic_dtype).astype(np.float64)

    with precision(analytic_dtype):
        t = Tensor(x64.astype(analytic_dtype), requires_grad=True)
        out = f(t)
        if out.size != 1:
            raise AutodiffError("finite_difference_check needs a scalar-valued closure")
        used = frozenset(n.op for n in out.graph().nodes) & NON_SMOOTH_OPS
        out.backward()
        analytic = np.zeros_like(x64) if t.grad is None else t.grad.astype(np.float64)

    def f64(v: np.ndarray) -> float:
        with precision(np.float64), no_grad():
            return float(f(Tensor(v)).data)

    base = f64(x64)
    if f64(x64) != base:
        raise AutodiffError("finite_difference_check: closure is not deterministic")
    numeric = np.empty_like(x64)
    flat = x64.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f64(x64)
        flat[i] = old - h
        fm = f64(x64)
        flat[i] = old
        nflat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if x64.size else 0.0
    return GradCheck(err, used)
