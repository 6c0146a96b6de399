"""
us-mae - masked-autoencoder pre-training and time-of-flight classification
for 1-D ultrasound tone-burst signals.
"""

__version__ = "0.1.0"

from .errors import (
    CompatibilityError,
    DataIOError,
    FormatError,
    InvalidParamsError,
    LabelRangeError,
    NonFiniteError,
    NumericError,
    ShapeError,
    UsageError,
    UsMaeError,
)
from .model import PRESETS, ModelConfig, param_count, preset
from .signal_synth import BurstParams, DatasetSpec, SignalRecord, generate_dataset
from .training import TrainConfig, finetune, pretrain

__all__ = [
    "__version__",
    "BurstParams",
    "CompatibilityError",
    "DataIOError",
    "DatasetSpec",
    "FormatError",
    "InvalidParamsError",
    "LabelRangeError",
    "ModelConfig",
    "NonFiniteError",
    "NumericError",
    "PRESETS",
    "ShapeError",
    "SignalRecord",
    "TrainConfig",
    "UsMaeError",
    "UsageError",
    "finetune",
    "generate_dataset",
    "param_count",
    "preset",
    "pretrain",
]
