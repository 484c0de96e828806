"""Surrogate architectures, physics-guided loss, and checkpoint IO."""

from .models import (
    KNOWN_CONV_COUNTS,
    KNOWN_LSTM_ONLY_TOTAL,
    KNOWN_LSTM_TOTALS,
    MODEL_KINDS,
    ModelInstance,
    ModelSpec,
    ModelSpecError,
    NormStats,
    build_cnn_lstm,
    build_cnn_unet,
    build_linear,
    build_model,
    format_parameter_report,
    forward,
    forward_window,
    parameter_count,
    parameter_report,
    predict_sequence,
    window_stack,
)
from .losses import LossConfig, LossConfigError, loss_components, mse_loss, physics_loss
from .checkpoint import (
    CHECKPOINT_SCHEMA,
    CheckpointError,
    load_checkpoint,
    model_size_bytes,
    params_close,
    save_checkpoint,
    set_param,
)

__all__ = [
    "CHECKPOINT_SCHEMA",
    "CheckpointError",
    "KNOWN_CONV_COUNTS",
    "KNOWN_LSTM_ONLY_TOTAL",
    "KNOWN_LSTM_TOTALS",
    "LossConfig",
    "LossConfigError",
    "MODEL_KINDS",
    "ModelInstance",
    "ModelSpec",
    "ModelSpecError",
    "NormStats",
    "build_cnn_lstm",
    "build_cnn_unet",
    "build_linear",
    "build_model",
    "format_parameter_report",
    "forward",
    "forward_window",
    "load_checkpoint",
    "loss_components",
    "model_size_bytes",
    "mse_loss",
    "parameter_count",
    "parameter_report",
    "params_close",
    "physics_loss",
    "predict_sequence",
    "save_checkpoint",
    "set_param",
    "window_stack",
]
