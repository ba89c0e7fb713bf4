"""Numerical toolkit for wavelet-domain Perona-Malik feature diffusion and
selective state-space token mixing, with a desk-scale dual-branch
segmentation pipeline built on both."""

from . import precision
from .errors import (ConfigError, DataError, DimensionError, FormatError,
                     PmtkError, UsageError)

__version__ = "0.1.0"

__all__ = [
    "precision",
    "PmtkError", "DimensionError", "ConfigError", "DataError", "FormatError",
    "UsageError",
    "__version__",
]
