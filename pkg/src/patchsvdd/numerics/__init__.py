from .optim import AdamState, adam_step, zero_grad
from .tensor import (
    DimensionError,
    Parameter,
    Tensor,
    concat,
    conv2d,
    conv_output_size,
    l2_norm,
    leaky_relu,
    linear,
    no_grad,
    softmax_cross_entropy,
    stack,
)

__all__ = [
    "AdamState",
    "DimensionError",
    "Parameter",
    "Tensor",
    "adam_step",
    "concat",
    "conv2d",
    "conv_output_size",
    "l2_norm",
    "leaky_relu",
    "linear",
    "no_grad",
    "softmax_cross_entropy",
    "stack",
    "zero_grad",
]
