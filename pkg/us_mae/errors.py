"""
Exception hierarchy for us-mae.

Every error carries the exit code the command line reports for it:
2 usage, 3 I/O and malformed data, 4 numeric, 5 compatibility.
"""


class UsMaeError(Exception):
    """Base exception for us-mae errors."""

    exit_code = 1


class UsageError(UsMaeError, ValueError):
    """Raised when flags, config values or call arguments are invalid."""

    exit_code = 2


class ShapeError(UsageError):
    """Raised when tensor or array extents do not line up."""


class InvalidParamsError(UsageError):
    """Raised when burst parameters fall outside the active dataset spec."""


class DataIOError(UsMaeError, OSError):
    """Raised when a file cannot be read or written."""

    exit_code = 3


class FormatError(DataIOError):
    """Raised when US1D or checkpoint bytes are malformed."""


class LabelRangeError(DataIOError):
    """Raised when a matched-filter label falls outside the class range."""


class NumericError(UsMaeError, ArithmeticError):
    """Raised for non-finite losses, gradients or undefined signal statistics."""

    exit_code = 4


class NonFiniteError(NumericError):
    """Raised when a tensor would hold NaN or Inf."""


class CompatibilityError(UsMaeError):
    """Raised when a checkpoint does not fit the requested model configuration."""

    exit_code = 5
