"""Exception types shared across the package."""

from __future__ import annotations


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class PromptLookupError(KeyError):
    """A prompt identity does not exist in the prompt set."""


class ParseError(ValueError):
    """A dataset or artifact file is malformed.

    ``offset`` is the byte offset (binary formats) or 1-based row number
    (CSV) at which parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
