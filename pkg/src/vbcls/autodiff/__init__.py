"""Minimal reverse-mode differentiation, dense layers and SGD."""

from vbcls.autodiff.gradcheck import analytic_gradients, finite_diff_check
from vbcls.autodiff.optim import OptimizerState, init_state, sgd_step
from vbcls.autodiff.tensor import (
    Tape,
    Tensor,
    add,
    affine,
    as_tensor,
    backward,
    columns,
    concat,
    current_tape,
    div,
    exp,
    expm1,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reset_tape,
    scale_grad,
    softmax,
    smoothed_targets,
    softmax_cross_entropy,
    square,
    squared_error,
    stack_rows,
    sub,
    sum_,
    take_rows,
)

__all__ = [
    "OptimizerState", "Tape", "Tensor", "add", "affine", "analytic_gradients", "as_tensor",
    "backward", "columns", "concat", "current_tape", "div", "exp", "expm1", "finite_diff_check",
    "init_state", "log", "log_softmax", "matmul", "mean", "mul", "no_grad", "relu",
    "reset_tape", "scale_grad", "sgd_step", "smoothed_targets", "softmax", "softmax_cross_entropy", "square",
    "squared_error", "stack_rows", "sub", "sum_", "take_rows",
]
