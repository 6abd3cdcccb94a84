"""Minimal dense tensors, reverse-mode autodiff and PointNet building blocks."""

from . import tensor as ops
from .checkpoint import dumps, load_into, loads, save
from .gradcheck import GradCheckResult, check, compare, numeric_grad
from .layers import MLP, BatchNorm, Linear, Module, bn_decay, set_bn_momentum, shared_mlp
from .optim import Adam, AdamState, StepDecay, adam_step
from .tensor import (
    Tape,
    Tensor,
    backward,
    concat,
    max_pool_points,
    softmax_cross_entropy,
)

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm",
    "GradCheckResult",
    "Linear",
    "MLP",
    "Module",
    "StepDecay",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "bn_decay",
    "check",
    "compare",
    "concat",
    "dumps",
    "load_into",
    "loads",
    "max_pool_points",
    "numeric_grad",
    "ops",
    "save",
    "set_bn_momentum",
    "shared_mlp",
    "softmax_cross_entropy",
]
