"""Phoneme-level BERT: whole-word masked phoneme modelling plus phoneme-to-grapheme prediction."""

from .config import MaskPolicy, ModelConfig, ProbeConfig, TrainConfig
from .errors import ConfigError, DataError, FormatError, NumericError, PLBertError, TraceMismatchError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FormatError",
    "MaskPolicy",
    "ModelConfig",
    "NumericError",
    "PLBertError",
    "ProbeConfig",
    "TrainConfig",
    "TraceMismatchError",
]
