"""Tensor core, autodiff tape, fused kernels and linear-algebra helpers."""
from . import kernels
from .gradcheck import grad_check, grad_check_report
from .linalg import NumericalError, pinv
from .ops import (
    IGNORE_INDEX,
    EmptyLossError,
    add,
    causal_softmax,
    cross_entropy,
    dropout,
    embedding,
    gated_update,
    layer_norm,
    masked_mean,
    matmul,
    mul,
    reshape,
    scale,
    sigmoid,
    silu,
    softmax_rows,
    sub,
    sum_all,
    take_rows,
    transpose,
)
from .rng import DropoutRNG, stream
from .tensor import NonFiniteError, ShapeError, Tape, Tensor

__all__ = [
    "IGNORE_INDEX", "DropoutRNG", "EmptyLossError", "NonFiniteError", "NumericalError", "ShapeError",
    "Tape", "Tensor", "add", "causal_softmax", "cross_entropy", "dropout", "embedding", "gated_update",
    "grad_check", "grad_check_report", "kernels", "layer_norm", "masked_mean", "matmul", "mul", "pinv",
    "reshape", "scale", "sigmoid", "silu", "softmax_rows", "stream", "sub", "sum_all", "take_rows",
    "transpose",
]
