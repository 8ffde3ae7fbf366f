"""Minimal deterministic reverse-mode autodiff over numpy arrays."""
from . import ops
from .ops import (
    add, avg_pool2d, channel_affine, conv2d, global_avg_pool, index, linear, max_pool2d,
    mean, mul, relu, reshape, softmax, softmax_cross_entropy,
)
from .tensor import DEFAULT_DTYPE, Node, Primitive, Tape, Tensor, active_tape, backward
from .train import TrainConfig, TrainHistory, sgd_step, train_loop

__all__ = [
    "ops", "Tensor", "Tape", "Node", "Primitive", "DEFAULT_DTYPE", "active_tape", "backward",
    "add", "mul", "index", "reshape", "relu", "conv2d", "channel_affine", "max_pool2d", "avg_pool2d",
    "global_avg_pool", "linear", "softmax", "softmax_cross_entropy", "mean",
    "TrainConfig", "TrainHistory", "sgd_step", "train_loop",
]
