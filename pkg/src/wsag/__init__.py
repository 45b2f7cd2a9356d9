"""Weakly supervised article grounding on 2D temporal proposal maps."""

from .errors import (
    ConfigError,
    FormatError,
    GenerationFailure,
    InvalidArgument,
    NumericFault,
    UndefinedMetric,
    UnsatisfiableNegative,
    WsagError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "GenerationFailure",
    "InvalidArgument",
    "NumericFault",
    "UndefinedMetric",
    "UnsatisfiableNegative",
    "WsagError",
    "__version__",
]
