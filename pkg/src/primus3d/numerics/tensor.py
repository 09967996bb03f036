"""Minimal dense tensor engine with reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (row-major) in one of two precisions:
float32 for training, float64 for oracles and gradient checking.  Every
differentiable operation records a backward closure on its output; calling
``backward()`` on a scalar walks the recorded graph in reverse creation
order exactly once, accumulating gradients additively, and then frees the
graph (the train-step lifecycle).

np.matmul dispatches to BLAS, so the matrix-shaped hot paths run at native
speed without any compiled extension of our own.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Sequence

import numpy as np
from scipy.special import erf

from ..errors import ConfigError, NumericalError, ShapeError
from . import conv as _conv

_NODE_IDS = itertools.count()
_GRAD_ENABLED = True
_DEBUG_CHECKS = False

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    np.float32: np.float32,
    np.float64: np.float64,
    np.dtype(np.float32): np.float32,
    np.dtype(np.float64): np.float64,
}


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection after every forward operation."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "_nid")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is None:
            arr = np.asarray(data)
            dtype = np.float64 if arr.dtype == np.float64 else np.float32
        try:
            dtype = _DTYPES[dtype]
        except KeyError:
            raise ConfigError(f"unsupported tensor dtype {dtype!r}; use float32 or float64")
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None
        self._nid = next(_NODE_IDS)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode pass from this tensor; frees the recorded graph."""
        if not self.requires_grad:
            raise ConfigError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without seed grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._prev)
        # creation order is a topological order, so reverse creation order
        # guarantees each node's grad is complete before its closure runs
        nodes.sort(key=lambda t: t._nid, reverse=True)
        self.grad = grad if self.grad is None else self.grad + grad
        for t in nodes:
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)
        for t in nodes:
            t._backward = None
            t._prev = ()
            if not t.requires_grad:
                t.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype), dtype=like.data.dtype)


def _check_dtypes(op: str, *ts: Tensor) -> None:
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise ConfigError(f"{op}: mixed dtypes {dt} and {t.data.dtype}")


def _finite(op: str, arr: np.ndarray) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {op}")


def _record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    _finite(op, data)
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes("add", a, b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _record("add", data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes("sub", a, b)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _record("sub", data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes("mul", a, b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _record("mul", data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes("div", a, b)
    data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record("div", data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _record("neg", -a.data, (a,), backward)


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _record("exp", data, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _record("log", data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _record("sigmoid", data, (a,), backward)


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s

    def backward(g):
        _accum(a, g * s * (1.0 + a.data * (1.0 - s)))

    return _record("silu", data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    # exact form: x * Phi(x), with Phi the standard normal CDF
    phi = 0.5 * (1.0 + erf(a.data / np.sqrt(2.0)))
    data = a.data * phi

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) / np.sqrt(2.0 * np.pi)
        _accum(a, g * (phi + a.data * pdf))

    return _record("gelu", data, (a,), backward)


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True))

    return _record("sum", data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.shape).astype(a.data.dtype, copy=True))

    return _record("mean", data, (a,), backward)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _record("reshape", data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _record("transpose", data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    _check_dtypes("concat", *tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _record("concat", data, tuple(tensors), backward)


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.data.dtype)

    def backward(g):
        dx = np.zeros_like(a.data)
        np.add.at(dx, key, g)
        _accum(a, dx)

    return _record("getitem", np.ascontiguousarray(data), (a,), backward)


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    data = np.take(a.data, indices, axis=axis)
    key = (slice(None),) * axis + (indices,)

    def backward(g):
        dx = np.zeros_like(a.data)
        np.add.at(dx, key, g)
        _accum(a, dx)

    return _record("index_select", data, (a,), backward)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} x {b.shape}") from exc

    def backward(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _record("matmul", data, (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    data = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _record("softmax", data, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    _check_dtypes("layer_norm", x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature size {d}")
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(var + eps)
    xhat = xc * r
    data = xhat * gamma.data + beta.data
    reduce_axes = tuple(range(data.ndim - 1))

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=reduce_axes))
        _accum(beta, g.sum(axis=reduce_axes))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, r * (dxhat - m1 - xhat * m2))

    return _record("layer_norm", data, (x, gamma, beta), backward)


# -- convolution --------------------------------------------------------------


def _stride3(stride) -> tuple[int, int, int]:
    if isinstance(stride, int):
        return (stride, stride, stride)
    s = tuple(int(v) for v in stride)
    if len(s) != 3:
        raise ShapeError(f"stride must be an int or 3-vector, got {stride!r}")
    return s


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None, stride) -> Tensor:
    stride = _stride3(stride)
    _check_dtypes("conv3d", x, w, *([bias] if bias is not None else []))
    data = _conv.conv3d_forward(x.data, w.data, stride)
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"conv3d bias shape {bias.shape} does not match out channels {w.shape[0]}")
        data = data + bias.data.reshape(1, -1, 1, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        if x.requires_grad:
            _accum(x, _conv.conv3d_grad_input(g, w.data, stride, x.shape))
        if w.requires_grad:
            _accum(w, _conv.conv3d_grad_weight(x.data, g, stride, w.shape))
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3, 4)))

    return _record("conv3d", data, parents, backward)


def conv_transpose3d(x: Tensor, w: Tensor, bias: Tensor | None, stride) -> Tensor:
    stride = _stride3(stride)
    _check_dtypes("conv_transpose3d", x, w, *([bias] if bias is not None else []))
    data = _conv.conv_transpose3d_forward(x.data, w.data, stride)
    if bias is not None:
        if bias.shape != (w.shape[1],):
            raise ShapeError(f"conv_transpose3d bias shape {bias.shape} does not match out channels {w.shape[1]}")
        data = data + bias.data.reshape(1, -1, 1, 1, 1)
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        if x.requires_grad:
            # adjoint of the adjoint: a plain convolution of the upstream grad
            _accum(x, _conv.conv3d_forward(g, w.data, stride))
        if w.requires_grad:
            _accum(w, _conv.conv3d_grad_weight(g, x.data, stride, w.shape))
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 2, 3, 4)))

    return _record("conv_transpose3d", data, parents, backward)
