"""Encoder-ConvLSTM-decoder trajectory forecaster."""

from .model import VARIANTS, Model, ModelConfig, build_model, shape_table
from .rollout import (
    RolloutResult,
    TopK,
    argmax_position,
    construct_next_input,
    model_input,
    precondition,
    predict_step,
    rollout,
    topk_positions,
)
from .train import EpochRecord, TrainConfig, TrainResult, loss_table, train

__all__ = [
    "VARIANTS",
    "Model",
    "ModelConfig",
    "build_model",
    "shape_table",
    "RolloutResult",
    "TopK",
    "argmax_position",
    "construct_next_input",
    "model_input",
    "precondition",
    "predict_step",
    "rollout",
    "topk_positions",
    "EpochRecord",
    "TrainConfig",
    "TrainResult",
    "loss_table",
    "train",
]
