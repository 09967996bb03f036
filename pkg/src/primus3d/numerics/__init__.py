"""Dense tensor engine: ops, reverse-mode autodiff, gradient checking."""

from .gradcheck import GradCheckReport, grad_check
from .tensor import (
    Tensor,
    add,
    concat,
    conv3d,
    conv_transpose3d,
    div,
    gelu,
    getitem,
    index_select,
    layer_norm,
    matmul,
    mul,
    neg,
    no_grad,
    reshape,
    set_debug_checks,
    sigmoid,
    silu,
    softmax,
    sub,
    texp,
    tlog,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "GradCheckReport",
    "Tensor",
    "add",
    "concat",
    "conv3d",
    "conv_transpose3d",
    "div",
    "gelu",
    "getitem",
    "grad_check",
    "index_select",
    "layer_norm",
    "matmul",
    "mul",
    "neg",
    "no_grad",
    "reshape",
    "set_debug_checks",
    "sigmoid",
    "silu",
    "softmax",
    "sub",
    "texp",
    "tlog",
    "tmean",
    "transpose",
    "tsum",
]
