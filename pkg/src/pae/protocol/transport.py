"""Byte-stream transports and a message-level connection with traffic counters.

TLS is left to whatever wraps the socket; every transport here is plaintext.
"""

import socket
import threading
from collections import Counter
from typing import Optional

from ..interfaces import TransportInterface
from .codec import FRAME_OVERHEAD, HEADER_SIZE, decode, encode, parse_header
from .messages import Message, MsgType

DEFAULT_PORT = 7431


class SocketTransport:
    """TCP stream."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    @classmethod
    def connect(cls, host: str, port: int, timeout: Optional[float] = None) -> "SocketTransport":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        return cls(sock)

    def send(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as e:
            raise ConnectionError(f"send failed: {e}") from e

    def recv_exact(self, n: int) -> bytes:
        chunks = bytearray()
        while len(chunks) < n:
            try:
                chunk = self._sock.recv(n - len(chunks))
            except OSError as e:
                raise ConnectionError(f"recv failed: {e}") from e
            if not chunk:
                raise ConnectionError(f"peer closed after {len(chunks)} of {n} bytes")
            chunks += chunk
        return bytes(chunks)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class _Pipe:
    """One direction of an in-process stream."""

    def __init__(self) -> None:
        self.buffer = bytearray()
        self.closed = False
        self.cond = threading.Condition()

    def write(self, data: bytes) -> None:
        with self.cond:
            if self.closed:
                raise ConnectionError("loopback stream closed")
            self.buffer += data
            self.cond.notify_all()

    def read(self, n: int, timeout: Optional[float]) -> bytes:
        with self.cond:
            ready = self.cond.wait_for(lambda: len(self.buffer) >= n or self.closed, timeout)
            if len(self.buffer) < n:
                reason = "closed" if self.closed or ready else "timed out"
                raise ConnectionError(
                    f"loopback stream {reason} with {len(self.buffer)} of {n} bytes"
                )
            out = bytes(self.buffer[:n])
            del self.buffer[:n]
            return out

    def close(self) -> None:
        with self.cond:
            self.closed = True
            self.cond.notify_all()


class LoopbackTransport:
    """In-process endpoint; see ``loopback_pair``."""

    def __init__(self, inbound: _Pipe, outbound: _Pipe, timeout: Optional[float] = None):
        self._inbound = inbound
        self._outbound = outbound
        self.timeout = timeout

    def send(self, data: bytes) -> None:
        self._outbound.write(bytes(data))

    def recv_exact(self, n: int) -> bytes:
        return self._inbound.read(n, self.timeout)

    def close(self) -> None:
        self._inbound.close()
        self._outbound.close()


def loopback_pair(
    timeout: Optional[float] = None,
) -> tuple[LoopbackTransport, LoopbackTransport]:
    """Two connected endpoints: whatever one sends, the other receives in order."""
    a_to_b, b_to_a = _Pipe(), _Pipe()
    return (
        LoopbackTransport(b_to_a, a_to_b, timeout),
        LoopbackTransport(a_to_b, b_to_a, timeout),
    )


class TapTransport:
    """Pass-through that keeps a copy of every byte sent."""

    def __init__(self, inner: TransportInterface):
        self.inner = inner
        self.captured = bytearray()

    def send(self, data: bytes) -> None:
        self.inner.send(data)
        self.captured += data

    def recv_exact(self, n: int) -> bytes:
        return self.inner.recv_exact(n)

    def close(self) -> None:
        self.inner.close()


def read_frame(transport: TransportInterface) -> bytes:
    """Read one complete frame, validating the header before reading the body."""
    header = transport.recv_exact(HEADER_SIZE)
    _, payload_len = parse_header(header)
    return header + transport.recv_exact(payload_len + FRAME_OVERHEAD - HEADER_SIZE)


class FrameConnection:
    """Message-level view of a transport with per-type byte counters."""

    def __init__(
        self,
        transport: TransportInterface,
        *,
        bytes_sent: Optional[Counter[MsgType]] = None,
        bytes_received: Optional[Counter[MsgType]] = None,
    ):
        self.transport = transport
        self.bytes_sent: Counter[MsgType] = Counter() if bytes_sent is None else bytes_sent
        self.bytes_received: Counter[MsgType] = (
            Counter() if bytes_received is None else bytes_received
        )
        self.frames_sent: Counter[MsgType] = Counter()
        self.frames_received: Counter[MsgType] = Counter()
        self._send_lock = threading.Lock()

    def send(self, msg: Message) -> int:
        frame = encode(msg)
        with self._send_lock:
            self.transport.send(frame)
            self.bytes_sent[msg.msg_type] += len(frame)
            self.frames_sent[msg.msg_type] += 1
        return len(frame)

    def recv(self) -> Message:
        frame = read_frame(self.transport)
        msg = decode(frame)
        self.bytes_received[msg.msg_type] += len(frame)
        self.frames_received[msg.msg_type] += 1
        return msg

    def close(self) -> None:
        self.transport.close()

    @property
    def total_sent(self) -> int:
        return sum(self.bytes_sent.values())

    @property
    def total_received(self) -> int:
        return sum(self.bytes_received.values())
