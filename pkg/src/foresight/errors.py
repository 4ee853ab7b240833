"""Exception hierarchy. Everything raised on purpose derives from ForesightError."""


class ForesightError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ForesightError):
    """Array shape or dimension mismatch."""


class ParameterError(ForesightError):
    """Invalid argument or configuration value."""


class DataError(ForesightError):
    """Input data violates a value-level precondition (NaN, non-positive depth, ...)."""


class NumericError(ForesightError):
    """A numerical routine failed (singular system, non-convergence)."""


class FormatError(ForesightError):
    """Malformed or truncated file.

    Carries the byte offset at which the problem was detected when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
