from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .ops import (
    add,
    binary_cross_entropy,
    concat,
    cross_entropy,
    gather_rows,
    l2_normalize_row,
    layer_norm,
    matmul,
    mean,
    mean_pool,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_row,
    sub,
    take,
    transpose,
)
from .ops import sum as sum_
from .optim import Adam
from .tensor import NonFiniteError, Tape, Tensor, backward, current_tape

__all__ = [
    "Adam", "CheckpointError", "NonFiniteError", "Tape", "Tensor", "add", "backward", "binary_cross_entropy",
    "concat", "cross_entropy", "current_tape", "gather_rows", "l2_normalize_row", "layer_norm", "load_checkpoint",
    "matmul", "mean", "mean_pool", "mul", "relu", "reshape", "save_checkpoint", "scale", "sigmoid", "softmax_row",
    "sub", "sum_", "take", "transpose",
]
