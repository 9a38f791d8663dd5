"""Minimal reverse-mode autodiff: tensors, ops, Adam, gradient checking."""

from .gradcheck import grad_check
from .init import he_uniform, xavier_uniform
from .ops import (
    concat,
    conv1d,
    dense,
    flatten,
    maxpool1d,
    mse,
    relu,
    reshape,
    softmax_cross_entropy,
    subtract,
)
from .optim import Adam, PlateauSchedule, plateau_update
from .tensor import Parameter, Tensor

__all__ = [
    "Adam",
    "Parameter",
    "PlateauSchedule",
    "Tensor",
    "concat",
    "conv1d",
    "dense",
    "flatten",
    "grad_check",
    "he_uniform",
    "maxpool1d",
    "mse",
    "plateau_update",
    "relu",
    "reshape",
    "softmax_cross_entropy",
    "subtract",
    "xavier_uniform",
]
