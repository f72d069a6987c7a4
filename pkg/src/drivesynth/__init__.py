"""Structure-conditioned sim-to-real driving video synthesis, desk scale."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DriveSynthError,
    JudgeError,
    NumericError,
    ShapeError,
    UsageError,
)

__all__ = [
    "ConfigurationError",
    "DriveSynthError",
    "JudgeError",
    "NumericError",
    "ShapeError",
    "UsageError",
    "__version__",
]
