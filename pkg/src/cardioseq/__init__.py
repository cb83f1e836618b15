"""Deterministic from-scratch toolkit for binary cardiac histopathology
patch classification: an inception-style CNN feeding a BiLSTM with
windowed sigmoid self-attention, trained with Adam + L2 + dropout on
96x96 RGB patches, with finite-difference verification throughout."""

__version__ = "0.1.0"

from .errors import (
    CardioseqError,
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    NumericError,
    TapeError,
    UnsupportedKernelError,
)
from .model import ModelConfig, ModelParams, Variant, build_model, model_forward, predict
from .rng import DeterministicRng
from .tensor import Tape, Tensor, grad_check
from .training import Checkpoint, Metrics, TrainConfig, evaluate, train

__all__ = [
    "CardioseqError", "CheckpointError", "ConfigError", "ContractError",
    "DataError", "DimensionError", "NumericError", "TapeError",
    "UnsupportedKernelError",
    "ModelConfig", "ModelParams", "Variant", "build_model", "model_forward",
    "predict", "DeterministicRng", "Tape", "Tensor", "grad_check",
    "Checkpoint", "Metrics", "TrainConfig", "evaluate", "train",
]
