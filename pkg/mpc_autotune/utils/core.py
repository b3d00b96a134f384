from enum import Enum
from typing import Any


class ErrorCode(Enum):
    """Error codes, grouped by the thousand."""

    UNKNOWN_ERROR = 1000
    INVALID_PARAMETER = 1001
    DIMENSION_MISMATCH = 1002

    CONFIG_INVALID = 2000
    CONFIG_NOT_FOUND = 2001
    MODEL_FILE_INVALID = 2002
    MODEL_VERSION_UNSUPPORTED = 2003
    PARAM_OUT_OF_BOUNDS = 2004

    FACTORIZATION_FAILED = 3000
    NON_FINITE_STATE = 3001

    SOLVER_DIVERGED = 4000
    SOLVER_REGULARIZATION_EXHAUSTED = 4001

    STALE_SOLUTION = 5000
    EPISODE_FAILED = 5001

    SURROGATE_FIT_FAILED = 6000
    KERNEL_NOT_PD = 6001
    ACQUISITION_FAILED = 6002

    STORAGE_READ_ERROR = 7000
    STORAGE_WRITE_ERROR = 7001
    JOURNAL_CORRUPT = 7002


class TunerException(Exception):
    """Base exception for everything the tuner raises on purpose."""

    def __init__(
        self,
        message: str,
        code: ErrorCode = ErrorCode.UNKNOWN_ERROR,
        details: dict[str, Any] | None = None,
        recoverable: bool = True,
        cause: Exception | None = None,
    ):
        self.message = message
        self.code = code
        self.details = details or {}
        self.recoverable = recoverable
        self.cause = cause
        super().__init__(message)

    def __str__(self) -> str:
        if self.details:
            return f"{self.message} (code: {self.code.name}, details: {self.details})"
        return f"{self.message} (code: {self.code.name})"

    @property
    def is_config_error(self) -> bool:
        return 2000 <= self.code.value < 3000

    @property
    def user_friendly_message(self) -> str:
        """Message suitable for the terminal, without internals."""
        messages = {
            ErrorCode.CONFIG_NOT_FOUND: "Config file not found.",
            ErrorCode.MODEL_VERSION_UNSUPPORTED: "Unsupported robot model file version.",
            ErrorCode.SOLVER_DIVERGED: "The MPC solver diverged.",
            ErrorCode.STALE_SOLUTION: "MPC solution too old for the control tick.",
            ErrorCode.JOURNAL_CORRUPT: "Campaign journal is corrupt.",
        }
        return messages.get(self.code, self.message or "Unknown error.")


class DimensionError(TunerException):
    def __init__(self, what: str, expected: Any, got: Any):
        super().__init__(
            f"{what}: expected {expected}, got {got}",
            code=ErrorCode.DIMENSION_MISMATCH,
            details={"expected": expected, "got": got},
        )


class ConfigError(TunerException):
    """Config problem anchored to a source location when one is known."""

    def __init__(
        self,
        message: str,
        path: str | None = None,
        line: int | None = None,
        code: ErrorCode = ErrorCode.CONFIG_INVALID,
    ):
        self.path = path
        self.line = line
        if path is not None and line is not None:
            message = f"{path}:{line}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message, code=code, recoverable=False)


class ModelFileError(ConfigError):
    def __init__(
        self,
        message: str,
        path: str | None = None,
        line: int | None = None,
        code: ErrorCode = ErrorCode.MODEL_FILE_INVALID,
    ):
        super().__init__(message, path, line, code=code)


class FactorizationError(TunerException):
    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(message, code=ErrorCode.FACTORIZATION_FAILED, details=details)


class DivergenceError(TunerException):
    """Solver or rollout produced non-finite values."""

    def __init__(
        self,
        message: str,
        trace: list[dict[str, Any]] | None = None,
        code: ErrorCode = ErrorCode.SOLVER_DIVERGED,
    ):
        self.trace = trace or []
        super().__init__(message, code=code, details={"iterations": len(self.trace)})


class StaleSolutionError(TunerException):
    def __init__(self, age: float, horizon: float):
        super().__init__(
            f"MPC solution age {age:.4f}s >= horizon {horizon:.4f}s",
            code=ErrorCode.STALE_SOLUTION,
            details={"age": age, "horizon": horizon},
        )


class JournalError(TunerException):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(f"{loc}{message}", code=ErrorCode.JOURNAL_CORRUPT)
