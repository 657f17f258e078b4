"""Interfaces for dependency injection and testing."""

import logging
import os
from typing import Protocol

from .formatters import format_record

LOG_ENV = "PAE_LOG"
_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
}


class LoggerInterface(Protocol):
    """Protocol for logging operations."""

    def debug(self, message: str) -> None:
        """Log a debug message."""
        ...

    def info(self, message: str) -> None:
        """Log an informational message."""
        ...

    def warning(self, message: str) -> None:
        """Log a warning message."""
        ...


class TransportInterface(Protocol):
    """Protocol for an ordered, reliable byte stream between device and server."""

    def send(self, data: bytes) -> None:
        """Write all of ``data``; raises ``ConnectionError`` once the stream is closed."""
        ...

    def recv_exact(self, n: int) -> bytes:
        """Block until exactly ``n`` bytes arrive; raises ``ConnectionError`` on EOF."""
        ...

    def close(self) -> None:
        """Close both directions."""
        ...


def log_level(value: str | None = None) -> int:
    """Map a ``PAE_LOG`` value to a logging level; unknown values fall back to warning."""
    if value is None:
        value = os.environ.get(LOG_ENV, "warning")
    return _LEVELS.get(value.strip().lower(), logging.WARNING)


def configure_logging(value: str | None = None) -> None:
    root = logging.getLogger("pae")
    root.setLevel(log_level(value))
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)


class DefaultLogger:
    """Default logger implementation over the stdlib ``pae`` logger tree."""

    def __init__(self, name: str = "pae"):
        self._logger = logging.getLogger(name)

    def debug(self, message: str) -> None:
        self._logger.debug(message)

    def info(self, message: str) -> None:
        self._logger.info(message)

    def warning(self, message: str) -> None:
        self._logger.warning(message)


class StatusInterface(Protocol):
    """Protocol for structured single-line status records."""

    def emit(self, event: str, **fields: object) -> None:
        """Publish one record."""
        ...


class DefaultStatus:
    """Writes ``key=value`` records to standard output."""

    def emit(self, event: str, **fields: object) -> None:
        print(format_record(event, fields), flush=True)


class NullStatus:
    def emit(self, event: str, **fields: object) -> None:
        pass
