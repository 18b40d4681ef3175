"""Dyna-style model-based RL with feature-level alignment of real and simulated data."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    AmpoError,
    ConfigurationError,
    InputError,
    NumericalError,
    TrainingError,
    UnsupportedConfigurationError,
    UsageError,
)
