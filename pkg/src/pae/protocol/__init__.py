"""Framed binary wire protocol between device and server."""

from .codec import (
    FRAME_OVERHEAD,
    HEADER_SIZE,
    MAX_PAYLOAD,
    activation_record_bytes,
    decode,
    decode_payload,
    encode,
    full_activation_record_bytes,
    full_record_overhead_bytes,
    record_overhead_bytes,
)
from .messages import (
    MESSAGE_CLASSES,
    Message,
    MsgAck,
    MsgActivationRecord,
    MsgDeploySideNet,
    MsgEpochDone,
    MsgError,
    MsgFullActivationRecord,
    MsgInit,
    MsgTrainStatus,
    MsgType,
)
from .transport import (
    DEFAULT_PORT,
    FrameConnection,
    LoopbackTransport,
    SocketTransport,
    TapTransport,
    loopback_pair,
    read_frame,
)

__all__ = [
    "DEFAULT_PORT",
    "FRAME_OVERHEAD",
    "HEADER_SIZE",
    "MAX_PAYLOAD",
    "MESSAGE_CLASSES",
    "FrameConnection",
    "LoopbackTransport",
    "Message",
    "MsgAck",
    "MsgActivationRecord",
    "MsgDeploySideNet",
    "MsgEpochDone",
    "MsgError",
    "MsgFullActivationRecord",
    "MsgInit",
    "MsgTrainStatus",
    "MsgType",
    "SocketTransport",
    "TapTransport",
    "activation_record_bytes",
    "decode",
    "decode_payload",
    "encode",
    "full_activation_record_bytes",
    "full_record_overhead_bytes",
    "loopback_pair",
    "read_frame",
    "record_overhead_bytes",
]
