"""Exception types shared across the package."""


class TokenMarkError(Exception):
    """Base class for all package errors."""


class DimensionError(TokenMarkError, ValueError):
    pass


class ValidationError(TokenMarkError, ValueError):
    pass


class CapacityError(TokenMarkError, ValueError):
    pass


class NumericError(TokenMarkError, ArithmeticError):
    pass


class GenerationError(TokenMarkError, RuntimeError):
    pass


class ParseError(TokenMarkError, ValueError):
    """Malformed dataset or checkpoint file. ``record`` is the failing record index, if any."""

    def __init__(self, message, record=None):
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)
        self.record = record
