"""
Exception hierarchy for sinomap.

Precondition and format failures derive from ValueError so callers can keep
catching ValueError; the CLI maps each family to its exit code.
"""

from typing import Optional


class SinomapError(Exception):
    """Base class for every error raised by sinomap."""


class ValidationError(SinomapError, ValueError):
    """An input violates a documented precondition."""


class ShapeMismatchError(ValidationError):
    """Two fields that must agree in shape do not."""


class NonFiniteError(ValidationError):
    """A field contains NaN or infinite entries."""


class ConfigError(ValidationError):
    """An experiment config is malformed or fails validation."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ManifestConflictError(ValidationError):
    """An artifact directory was produced by a different config or seed."""


class FormatError(SinomapError, ValueError):
    """A binary artifact cannot be decoded."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class MissingInputError(SinomapError, FileNotFoundError):
    """A pipeline stage needs an artifact an earlier stage did not write."""
