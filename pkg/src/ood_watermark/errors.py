"""Exceptions raised by the OOD watermarking toolkit."""

from __future__ import annotations


class OodWatermarkError(Exception):
    """Base class for every error raised by this package."""


class OodWatermarkInvalidArgumentError(OodWatermarkError, ValueError):
    """An argument is outside the domain an operation accepts."""


class OodWatermarkStateError(OodWatermarkError):
    """An object is used before it reached the required state."""


class OodWatermarkConfigError(OodWatermarkError):
    """An experiment configuration is malformed or references missing files."""


class OodWatermarkFormatError(OodWatermarkError):
    """A binary artifact does not match its documented layout."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
