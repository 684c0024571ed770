from .tensor import Tensor, as_tensor, no_grad, grad_enabled
from .ops import (
    ConvSpec,
    add,
    concat,
    conv3d,
    div,
    exp,
    gelu,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    pad,
    permute,
    power,
    repeat,
    reshape,
    roll,
    slice_,
    softmax,
    sqrt,
    sub,
    sum_,
    take,
)
from .gradcheck import GradCheckReport, grad_check, numerical_grad

__all__ = [
    "Tensor", "as_tensor", "no_grad", "grad_enabled", "ConvSpec",
    "add", "concat", "conv3d", "div", "exp", "gelu", "layer_norm", "log",
    "matmul", "mean", "mul", "neg", "pad", "permute", "power", "repeat",
    "reshape", "roll", "slice_", "softmax", "sqrt", "sub", "sum_", "take",
    "GradCheckReport", "grad_check", "numerical_grad",
]
