from .core import (
    ConfigError,
    DimensionError,
    DivergenceError,
    ErrorCode,
    FactorizationError,
    JournalError,
    ModelFileError,
    StaleSolutionError,
    TunerException,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "ErrorCode",
    "FactorizationError",
    "JournalError",
    "ModelFileError",
    "StaleSolutionError",
    "TunerException",
]
