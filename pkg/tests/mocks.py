"""Shared mock implementations for testing."""

from typing import Any, Iterable

from pae.server.service import PaeServer
from pae.simulate import LoopbackConnector


class MockLogger:
    """Mock logger for testing."""

    def __init__(self):
        self.debugs = []
        self.infos = []
        self.warnings = []

    def debug(self, message: str) -> None:
        self.debugs.append(message)

    def info(self, message: str) -> None:
        self.infos.append(message)

    def warning(self, message: str) -> None:
        self.warnings.append(message)


class MockStatus:
    """Collects status records."""

    def __init__(self):
        self.records: list[tuple[str, dict[str, Any]]] = []

    def emit(self, event: str, **fields: object) -> None:
        self.records.append((event, dict(fields)))

    def events(self) -> list[str]:
        return [event for event, _ in self.records]


class MockSleep:
    """Records requested delays instead of sleeping."""

    def __init__(self):
        self.delays: list[float] = []

    def __call__(self, seconds: float) -> None:
        self.delays.append(seconds)


class _FlakyTransport:
    def __init__(self, inner, owner: "FlakyConnector"):
        self.inner = inner
        self.owner = owner

    def send(self, data: bytes) -> None:
        self.owner.sends += 1
        if self.owner.sends in self.owner.fail_on:
            self.inner.close()
            raise ConnectionError(f"injected failure on send {self.owner.sends}")
        self.inner.send(data)

    def recv_exact(self, n: int) -> bytes:
        return self.inner.recv_exact(n)

    def close(self) -> None:
        self.inner.close()


class FlakyConnector:
    """Loopback connections to ``server`` that break on chosen sends (1-based, across connections)."""

    def __init__(self, server: PaeServer, fail_on: Iterable[int] = ()):
        self.loopback = LoopbackConnector(server, timeout=10.0)
        self.fail_on = set(fail_on)
        self.sends = 0
        self.connections = 0

    def __call__(self) -> _FlakyTransport:
        self.connections += 1
        return _FlakyTransport(self.loopback(), self)


class DeadConnector:
    """A server that is never reachable."""

    def __init__(self):
        self.attempts = 0

    def __call__(self):
        self.attempts += 1
        raise ConnectionError("connection refused")
