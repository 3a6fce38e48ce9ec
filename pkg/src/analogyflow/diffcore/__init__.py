"""Minimal reverse-mode differentiation over numpy arrays."""

from .gradcheck import grad_check, run_primitive_suite
from .ops import (
    NonFiniteError,
    add,
    add_row,
    bmatvec,
    clamp,
    concat,
    matmul,
    mean,
    mse,
    mul,
    reshape,
    scale,
    slice,
    softmax,
    sub,
    sum,
    take_rows,
    tanh,
    transpose,
)
from .tensor import ShapeError, Tape, TapeError, Tensor, as_tensor, backward

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "add",
    "add_row",
    "as_tensor",
    "backward",
    "bmatvec",
    "clamp",
    "concat",
    "grad_check",
    "matmul",
    "mean",
    "mse",
    "mul",
    "reshape",
    "run_primitive_suite",
    "scale",
    "slice",
    "softmax",
    "sub",
    "sum",
    "take_rows",
    "tanh",
    "transpose",
]
