"""Error types shared across the device, the server and the wire protocol."""

from enum import IntEnum


class DimensionError(ValueError):
    """Tensor shapes do not fit together."""


class ConfigError(ValueError):
    """A configuration value is invalid or conflicts with another."""


class InputError(ValueError):
    """Input data violates a precondition (token range, labels, padding)."""


class UsageError(RuntimeError):
    """An operation was called in a state that does not allow it."""


class ProtocolError(ValueError):
    """Base class for wire protocol failures."""


class TruncatedFrameError(ProtocolError):
    """Frame is shorter than its header or declared payload."""


class BadMagicError(ProtocolError):
    """Frame does not start with the protocol magic."""


class VersionMismatchError(ProtocolError):
    """Frame carries a protocol version this build does not speak."""


class CrcMismatchError(ProtocolError):
    """Checksum over message type and payload does not verify."""


class UnknownMessageTypeError(ProtocolError):
    """Message type byte is not a known message."""


class FrameTooLargeError(ProtocolError):
    """Declared payload length exceeds the configured frame limit."""


class MalformedPayloadError(ProtocolError):
    """Payload does not parse as the declared message type."""


class CacheError(RuntimeError):
    """Base class for activation cache failures."""


class SealedCacheError(CacheError):
    """Append attempted after the cache was sealed."""


class DuplicateSampleError(CacheError):
    """A sample id is already present in the cache."""


class CountMismatchError(CacheError):
    """Sealing sample count disagrees with the cache or the announced dataset size."""


class CacheCorruptionError(CacheError):
    """A non-tail cache record failed its checksum."""

    def __init__(self, record_index: int, message: str):
        self.record_index = record_index
        super().__init__(f"record {record_index}: {message}")


class TransmissionAborted(RuntimeError):
    """Epoch-1 transmission gave up after exhausting its retry budget."""

    def __init__(self, acked_batches: int, total_batches: int, cause: Exception):
        self.acked_batches = acked_batches
        self.total_batches = total_batches
        self.cause = cause
        super().__init__(
            f"transmission aborted after {acked_batches}/{total_batches} "
            f"acknowledged batches: {cause}"
        )


class ErrorCode(IntEnum):
    """Error codes carried by MsgError."""

    CONFIG_CONFLICT = 1
    DIMENSION_MISMATCH = 2
    DUPLICATE_SAMPLE = 3
    CACHE_SEALED = 4
    NO_SESSION = 5
    BAD_STATE = 6
    PROTOCOL = 7
    COUNT_MISMATCH = 8


class RemoteError(RuntimeError):
    """The peer answered with MsgError."""

    def __init__(self, code: ErrorCode, message: str):
        self.code = code
        self.message = message
        super().__init__(f"[{code.name}] {message}")
