"""Exception types shared across the package."""

from __future__ import annotations


class FeduError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FeduError, ValueError):
    """Operand shapes do not agree."""


class DegenerateInputError(FeduError, ValueError):
    """An input row has (numerically) zero norm and cannot be normalized."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class ContractError(FeduError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class ConfigurationError(FeduError, ValueError):
    """Invalid configuration or experiment setup."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.message = message
        self.field = field
        self.line = line


class ParseError(FeduError, ValueError):
    """A binary file could not be decoded."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
