from .losses import LossBreakdown, LossWeights, PROB_FLOOR, bce, losses, mse, softmax_cross_entropy
from .ops import (
    add, broadcast_to, concat, conv2d, elementwise, embedding, layer_norm, linear, matmul, mean,
    mul, relu, reshape, sigmoid, softmax_attention, sub, take, tanh, transpose, transposed_conv2d,
)
from .ops import sum as tsum
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ConfigurationError, ShapeError, Tape, TapeError, Tensor, active_tape, backward, default_dtype,
    precision,
)

__all__ = [
    "Adam", "AdamState", "ConfigurationError", "LossBreakdown", "LossWeights", "PROB_FLOOR",
    "ShapeError", "Tape", "TapeError", "Tensor", "active_tape", "adam_step", "add", "backward",
    "bce", "broadcast_to", "concat", "conv2d", "default_dtype", "elementwise", "embedding",
    "layer_norm", "linear", "losses", "matmul", "mean", "mse", "mul", "precision", "relu",
    "reshape", "sigmoid", "softmax_attention", "softmax_cross_entropy", "sub", "take", "tanh",
    "transpose", "transposed_conv2d", "tsum",
]
