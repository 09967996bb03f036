"""Raw ndarray kernels for 3D convolution and its adjoint.

Forward/gradient kernels operate on plain numpy arrays; the autodiff layer
in tensor.py wraps them.  Layout conventions:

  conv3d            x: (b, c, Z, Y, X)   w: (o, c, kz, ky, kx)  -> (b, o, z', y', x')
  conv_transpose3d  x: (b, ci, Z, Y, X)  w: (ci, co, kz, ky, kx) -> (b, co, (Z-1)*sz+kz, ...)

With stride == kernel (the tokenizer/decoder case) both reduce to a reshape
plus one matmul; the general-stride path extracts windows with stride tricks
or scatters per kernel offset.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError

__all__ = [
    "conv3d_forward",
    "conv3d_grad_input",
    "conv3d_grad_weight",
    "conv_transpose3d_forward",
    "conv3d_out_shape",
    "conv_transpose3d_out_shape",
]


def _check_conv_shapes(x_shape, w_shape, stride):
    if len(x_shape) != 5 or len(w_shape) != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x_shape} vs weight {w_shape}")
    for i in range(3):
        if w_shape[2 + i] > x_shape[2 + i]:
            raise ShapeError(f"conv3d kernel larger than input: input {x_shape} vs weight {w_shape}")
        if stride[i] < 1:
            raise ShapeError(f"conv3d stride must be positive, got {tuple(stride)}")


def conv3d_out_shape(x_shape, w_shape, stride):
    _check_conv_shapes(x_shape, w_shape, stride)
    spatial = tuple((x_shape[2 + i] - w_shape[2 + i]) // stride[i] + 1 for i in range(3))
    return (x_shape[0], w_shape[0]) + spatial


def conv_transpose3d_out_shape(x_shape, w_shape, stride):
    if len(x_shape) != 5 or len(w_shape) != 5:
        raise ShapeError(f"conv_transpose3d expects 5-d input and weight, got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[0]:
        raise ShapeError(f"conv_transpose3d channel mismatch: input {x_shape} vs weight {w_shape}")
    spatial = tuple((x_shape[2 + i] - 1) * stride[i] + w_shape[2 + i] for i in range(3))
    return (x_shape[0], w_shape[1]) + spatial


def _windows(x, kernel, stride):
    """Strided (b, z', y', x', c*kz*ky*kx) window matrix of x."""
    sz, sy, sx = stride
    v = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=(2, 3, 4))
    v = v[:, :, ::sz, ::sy, ::sx]
    # (b, c, z', y', x', kz, ky, kx) -> (b, z', y', x', c, kz, ky, kx)
    v = np.ascontiguousarray(np.moveaxis(v, 1, 4))
    b, zp, yp, xp = v.shape[:4]
    return v.reshape(b, zp, yp, xp, -1)


def conv3d_forward(x, w, stride):
    b, o = x.shape[0], w.shape[0]
    out_shape = conv3d_out_shape(x.shape, w.shape, stride)
    win = _windows(x, w.shape[2:], stride)
    out = win.reshape(-1, win.shape[-1]) @ w.reshape(o, -1).T
    return np.moveaxis(out.reshape(b, *out_shape[2:], o), 4, 1)


def conv3d_grad_weight(x, gy, stride, w_shape):
    win = _windows(x, w_shape[2:], stride)
    g = np.moveaxis(gy, 1, 4).reshape(-1, gy.shape[1])
    return (g.T @ win.reshape(g.shape[0], -1)).reshape(w_shape)


def conv3d_grad_input(gy, w, stride, x_shape):
    o, c = w.shape[:2]
    kz, ky, kx = w.shape[2:]
    sz, sy, sx = stride
    b = gy.shape[0]
    zp, yp, xp = gy.shape[2:]
    g = np.moveaxis(gy, 1, 4)  # (b, z', y', x', o)
    dx = np.zeros(x_shape, dtype=gy.dtype)
    if (kz, ky, kx) == (sz, sy, sx):
        # non-overlapping: one matmul, then undo the patch reshape
        cols = g.reshape(-1, o) @ w.reshape(o, -1)  # (b*z'y'x', c*kz*ky*kx)
        cols = cols.reshape(b, zp, yp, xp, c, kz, ky, kx)
        cols = cols.transpose(0, 4, 1, 5, 2, 6, 3, 7)
        dx[:, :, : zp * sz, : yp * sy, : xp * sx] = cols.reshape(b, c, zp * sz, yp * sy, xp * sx)
        return dx
    for i in range(kz):
        for j in range(ky):
            for k in range(kx):
                contrib = g @ w[:, :, i, j, k]  # (b, z', y', x', c)
                dx[:, :, i : i + sz * zp : sz, j : j + sy * yp : sy, k : k + sx * xp : sx] += np.moveaxis(
                    contrib, 4, 1
                )
    return dx


def conv_transpose3d_forward(x, w, stride):
    out_shape = conv_transpose3d_out_shape(x.shape, w.shape, stride)
    ci, co = w.shape[:2]
    b = x.shape[0]
    Z, Y, X = x.shape[2:]
    kz, ky, kx = w.shape[2:]
    sz, sy, sx = stride
    g = np.moveaxis(x, 1, 4)  # (b, Z, Y, X, ci)
    out = np.zeros(out_shape, dtype=x.dtype)
    if (kz, ky, kx) == (sz, sy, sx):
        cols = g.reshape(-1, ci) @ w.reshape(ci, -1)  # (b*ZYX, co*kz*ky*kx)
        cols = cols.reshape(b, Z, Y, X, co, kz, ky, kx).transpose(0, 4, 1, 5, 2, 6, 3, 7)
        return np.ascontiguousarray(cols.reshape(out_shape))
    for i in range(kz):
        for j in range(ky):
            for k in range(kx):
                contrib = g @ w[:, :, i, j, k]  # (b, Z, Y, X, co)
                out[:, :, i : i + sz * Z : sz, j : j + sy * Y : sy, k : k + sx * X : sx] += np.moveaxis(
                    contrib, 4, 1
                )
    return out
