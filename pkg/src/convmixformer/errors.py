"""Exception hierarchy shared by every module.

The CLI maps these onto exit statuses, so each class belongs to exactly one
of three families: usage/config problems, data/format problems, and numeric
failures.
"""


class ConvMixError(Exception):
    """Root of all package errors."""


class UsageError(ConvMixError):
    pass


class ConfigError(UsageError, ValueError):
    pass


class DimensionError(ConvMixError, ValueError):
    pass


class StateError(ConvMixError, RuntimeError):
    pass


class GraphError(ConvMixError, RuntimeError):
    pass


class DataError(ConvMixError):
    pass


class FormatError(DataError, ValueError):
    """Malformed bytes or text; ``offset`` is the byte (or line) position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(DataError, ValueError):
    pass


class NumericError(ConvMixError, ArithmeticError):
    pass


class NonFiniteError(NumericError):
    pass


class DeterminismError(NumericError):
    pass
