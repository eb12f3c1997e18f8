"""Learned input watermarks that sharpen out-of-distribution detection of a fixed classifier."""

from .errors import (
    OodWatermarkConfigError,
    OodWatermarkError,
    OodWatermarkFormatError,
    OodWatermarkInvalidArgumentError,
    OodWatermarkStateError,
)

__version__ = "0.1.0"

__all__ = [
    "OodWatermarkConfigError",
    "OodWatermarkError",
    "OodWatermarkFormatError",
    "OodWatermarkInvalidArgumentError",
    "OodWatermarkStateError",
    "__version__",
]
