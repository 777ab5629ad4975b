"""Segment-ordering pre-training for paragraph-aware encoders, in plain numpy."""

from .errors import (
    CapacityError,
    CompatibilityError,
    ConfigError,
    CorruptionError,
    DataError,
    NumericError,
    SegOrderError,
)

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "CompatibilityError",
    "ConfigError",
    "CorruptionError",
    "DataError",
    "NumericError",
    "SegOrderError",
    "__version__",
]
