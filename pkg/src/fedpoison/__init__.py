"""Federated-learning poisoning simulator for IQ signal classifiers."""

from fedpoison.errors import (
    ConfigurationError,
    FormatError,
    InputError,
    NumericError,
    RoundError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "FormatError",
    "InputError",
    "NumericError",
    "RoundError",
    "__version__",
]
