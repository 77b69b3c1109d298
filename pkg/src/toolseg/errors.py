"""Exception types shared across the package."""


class ToolsegError(Exception):
    """Base class for all package errors."""


class ParameterError(ToolsegError, ValueError):
    """An argument or configuration value is outside its legal range."""


class DataError(ToolsegError, RuntimeError):
    """A dataset is missing, empty or malformed."""


class LabelHygieneError(DataError):
    """Raised when code tries to read ground truth that is audit-only."""


class NumericError(ToolsegError, FloatingPointError):
    """A computation produced non-finite values."""
