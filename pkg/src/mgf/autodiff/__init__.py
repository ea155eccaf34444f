"""Minimal reverse-mode autodiff engine used to train every model here."""

from mgf.autodiff.gradcheck import GradCheckResult, finite_diff_check
from mgf.autodiff.tensor import (
    Tensor,
    abs_,
    add,
    backward,
    clip,
    concat,
    constant,
    conv1d,
    conv_transpose1d,
    div,
    exp,
    gelu,
    getitem,
    grad_enabled,
    layer_norm,
    log,
    logsumexp,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    parameter,
    power,
    relu,
    reshape,
    softmax,
    sqrt,
    sub,
    sum_,
    swapaxes,
    take,
    tanh,
    transpose,
)

__all__ = [
    "GradCheckResult", "Tensor", "abs_", "add", "backward", "clip", "concat", "constant",
    "conv1d", "conv_transpose1d", "div", "exp", "finite_diff_check", "gelu", "getitem",
    "grad_enabled", "layer_norm", "log", "logsumexp", "matmul", "mean", "mul", "neg",
    "no_grad", "parameter", "power", "relu", "reshape", "softmax", "sqrt", "sub", "sum_",
    "swapaxes", "take", "tanh", "transpose",
]
