"""Dense tensors, reverse-mode differentiation and gradient verification."""

from . import kernels, ops
from .gradcheck import ParamCheck, finite_diff_check, relative_error
from .ops import (
    add,
    add_bias,
    concat,
    embedding,
    expand_batch,
    gather_positions,
    gelu,
    layer_norm,
    masked_mean,
    matmul,
    merge_heads,
    mul,
    narrow,
    reshape,
    row_scale,
    scale,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    split_heads,
    sub,
    take_columns,
    transpose,
)
from .tensor import Tape, Tensor, active_tape, backward

__all__ = [
    "ParamCheck", "Tape", "Tensor", "active_tape", "add", "add_bias", "backward", "concat",
    "embedding", "expand_batch", "finite_diff_check", "gather_positions", "gelu", "kernels",
    "layer_norm", "masked_mean", "matmul", "merge_heads", "mul", "narrow", "ops",
    "relative_error", "reshape", "row_scale", "scale", "sigmoid", "softmax",
    "softmax_cross_entropy", "split_heads", "sub", "take_columns", "transpose",
]
