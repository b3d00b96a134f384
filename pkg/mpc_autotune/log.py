import sys
from typing import Any

from loguru import logger as _logger

_FORMAT = (
    "<green>{time:HH:mm:ss.SSS}</green> | <level>{level: <8}</level> | "
    "<cyan>{extra[tag]}</cyan>{message}"
)


class TunerLogger:
    """Thin front for loguru with the ``command=`` / ``e=`` call shape."""

    def _log(
        self,
        level: str,
        message: str,
        command: str | None = None,
        e: BaseException | None = None,
        **extra: Any,
    ) -> None:
        tag = f"[{command}] " if command else ""
        bound = _logger.bind(tag=tag, **extra)
        if e is not None:
            bound.opt(depth=2, exception=e).log(level, message)
        else:
            bound.opt(depth=2).log(level, message)

    def trace(self, message: str, command: str | None = None, **extra: Any) -> None:
        self._log("TRACE", message, command, **extra)

    def debug(self, message: str, command: str | None = None, **extra: Any) -> None:
        self._log("DEBUG", message, command, **extra)

    def info(self, message: str, command: str | None = None, **extra: Any) -> None:
        self._log("INFO", message, command, **extra)

    def success(self, message: str, command: str | None = None, **extra: Any) -> None:
        self._log("SUCCESS", message, command, **extra)

    def warning(
        self,
        message: str,
        command: str | None = None,
        e: BaseException | None = None,
        **extra: Any,
    ) -> None:
        self._log("WARNING", message, command, e, **extra)

    def error(
        self,
        message: str,
        command: str | None = None,
        e: BaseException | None = None,
        **extra: Any,
    ) -> None:
        self._log("ERROR", message, command, e, **extra)


def configure_logging(level: str = "INFO", serialize: bool = False) -> None:
    """Replace loguru's default sink with the project sink on stderr."""
    _logger.remove()
    _logger.configure(extra={"tag": ""})
    _logger.add(
        sys.stderr,
        level=level.upper(),
        format=_FORMAT,
        serialize=serialize,
        backtrace=False,
        diagnose=False,
    )


_logger.configure(extra={"tag": ""})
logger = TunerLogger()
