"""Reverse-mode differentiation for exactly the operators the forecaster uses."""

from .checkpoint import CheckpointError, file_sha256, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numeric_grad, relative_error
from .ops import (
    add,
    bilinear_up2,
    chunk,
    concat,
    conv2d,
    conv_lstm_step,
    maxpool2,
    mean,
    mse_loss,
    mul,
    relu,
    safety_loss,
    sigmoid,
    sub,
    take_channels,
    tanh,
    total,
)
from .optim import OptimizerState, adam_step, clip_global_norm, global_norm
from .tensor import Tensor, no_grad

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "relu",
    "total",
    "mean",
    "concat",
    "chunk",
    "take_channels",
    "conv2d",
    "maxpool2",
    "bilinear_up2",
    "mse_loss",
    "safety_loss",
    "conv_lstm_step",
    "clip_global_norm",
    "global_norm",
    "adam_step",
    "OptimizerState",
    "save_checkpoint",
    "load_checkpoint",
    "file_sha256",
    "CheckpointError",
    "check_gradients",
    "numeric_grad",
    "relative_error",
]
