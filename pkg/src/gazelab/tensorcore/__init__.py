"""Minimal float64 array engine with reverse-mode differentiation."""

from .optim import Adam, adam_step
from .params import MAGIC, CheckpointError, ParamSet, write_atomic
from .tensor import (
    ARCCOS_EPS,
    ShapeError,
    Tensor,
    abs_,
    add,
    arccos,
    as_tensor,
    bilinear_matrix,
    clamp,
    concat,
    conv2d,
    cos,
    depth_to_space,
    div,
    getitem,
    is_grad_enabled,
    leaky_relu,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    resize_bilinear,
    sigmoid,
    sin,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    window_cov,
    window_mean,
    window_var,
)

__all__ = [
    "ARCCOS_EPS", "Adam", "CheckpointError", "MAGIC", "ParamSet", "ShapeError", "Tensor",
    "abs_", "adam_step", "add", "arccos", "as_tensor", "bilinear_matrix", "clamp", "concat",
    "conv2d", "cos", "depth_to_space", "div", "getitem", "is_grad_enabled", "leaky_relu",
    "matmul", "mean", "mul", "no_grad", "reshape", "resize_bilinear", "sigmoid", "sin", "sqrt",
    "square", "stack", "sub", "sum_", "window_cov", "window_mean", "window_var", "write_atomic",
]
