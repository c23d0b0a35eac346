"""Dense tensors, numpy kernels and the reverse-mode gradient tape."""

from mobile_portrait.tensor.core import Function, GradTape, Tensor, as_tensor, backward
from mobile_portrait.tensor.functional import (
    concat,
    conv2d,
    grid_sample,
    linear,
    resize,
    softmax,
    softmax_channels,
)
from mobile_portrait.tensor.kernels import identity_grid

__all__ = [
    "Function",
    "GradTape",
    "Tensor",
    "as_tensor",
    "backward",
    "concat",
    "conv2d",
    "grid_sample",
    "identity_grid",
    "linear",
    "resize",
    "softmax",
    "softmax_channels",
]
