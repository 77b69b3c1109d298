"""Consistency-based sim-to-real adaptation for binary tool segmentation on synthetic scenes."""
from .errors import DataError, LabelHygieneError, NumericError, ParameterError, ToolsegError

__version__ = "0.1.0"

__all__ = ["DataError", "LabelHygieneError", "NumericError", "ParameterError", "ToolsegError", "__version__"]
