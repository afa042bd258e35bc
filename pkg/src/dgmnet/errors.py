"""Exception types shared across the package."""


class DGMError(Exception):
    """Base class for all package errors."""


class EmptyInputError(DGMError, ValueError):
    pass


class FieldSizeError(DGMError, ValueError):
    """Field too small for the requested stencil."""


class ShapeMismatchError(DGMError, ValueError):
    pass


class NumericError(DGMError, ArithmeticError):
    """Non-finite input or evaluation."""


class UndefinedLossError(DGMError, ValueError):
    """Every pixel was ignored."""


class UndefinedMetricError(DGMError, ValueError):
    pass


class ConfigError(DGMError, ValueError):
    pass


class FieldFileError(DGMError, OSError):
    """Malformed field or mask file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
