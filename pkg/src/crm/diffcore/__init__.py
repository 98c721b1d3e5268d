"""Dense-array math with reverse-mode gradients and an Adam optimizer."""

from . import ops
from .gradcheck import GradCheckReport, check_gradients, grad_check
from .ops import (
    abs,
    add,
    bilinear_matrix,
    broadcast_to,
    clip,
    concat,
    conv2d,
    div,
    exp,
    gather_rows,
    getitem,
    linear,
    log,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    resize_bilinear,
    sigmoid,
    square,
    sub,
    sum,
    transpose,
)
from .optim import NonFiniteGradientError, OptimizerState, adam_step
from .tensor import PreconditionError, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "GradCheckReport",
    "NonFiniteGradientError",
    "OptimizerState",
    "PreconditionError",
    "Tensor",
    "abs",
    "adam_step",
    "add",
    "as_tensor",
    "bilinear_matrix",
    "broadcast_to",
    "check_gradients",
    "clip",
    "concat",
    "conv2d",
    "div",
    "exp",
    "gather_rows",
    "getitem",
    "grad_check",
    "is_grad_enabled",
    "linear",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "ops",
    "relu",
    "reshape",
    "resize_bilinear",
    "sigmoid",
    "square",
    "sub",
    "sum",
    "transpose",
]
