"""Sample reweighting for sim-to-real multi-task cellular traffic forecasting."""

from .errors import (ConfigError, Diverged, InvalidRange, IoError, NonFiniteGradient,
                     NonFiniteValue, NonScalarOutput, ShapeMismatch, SimReweightError,
                     WindowTooLong, ZeroTotalLoss)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Diverged", "InvalidRange", "IoError", "NonFiniteGradient", "NonFiniteValue",
    "NonScalarOutput", "ShapeMismatch", "SimReweightError", "WindowTooLong", "ZeroTotalLoss",
]
