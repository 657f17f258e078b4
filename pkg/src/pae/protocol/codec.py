"""Framing and payload encoding. The byte layout is normative; see PROTOCOL.md.

Frame::

    magic "PAEM" | version u8 | msg_type u8 | payload_len u32 | payload | crc32 u32

All integers and floats are little-endian; the CRC covers msg_type ‖ payload.
"""

import struct
import zlib

import numpy as np

from ..errors import (
    BadMagicError,
    CrcMismatchError,
    ErrorCode,
    FrameTooLargeError,
    MalformedPayloadError,
    ProtocolError,
    TruncatedFrameError,
    UnknownMessageTypeError,
    VersionMismatchError,
)
from ..model import ARCH_CODES, NONLINEARITY_CODES, OPTIMIZER_CODES, decode_code
from .messages import (
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

MAGIC = b"PAEM"
VERSION = 1
MAX_PAYLOAD = 1 << 30

_HEADER = struct.Struct("<4sBBI")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEADER.size
FRAME_OVERHEAD = _HEADER.size + _CRC.size

_INIT = struct.Struct("<QIIIBIdBdddQBQI")
_RECORD_HEADER = struct.Struct("<QIIIIII")
_FULL_HEADER = struct.Struct("<QIIIIIII")
_EPOCH_DONE = struct.Struct("<QQ")
_TRAIN_STATUS = struct.Struct("<IdQ")
_ACK = struct.Struct("<BI")
_ERROR = struct.Struct("<H")

RECORD_HEADER_SIZE = _RECORD_HEADER.size
FULL_RECORD_HEADER_SIZE = _FULL_HEADER.size
WIRE_FLOAT = np.dtype("<f4")


def activation_record_bytes(L: int, H: int, C: int, B: int, float_width: int = 4) -> int:
    """Float payload of one pivot record: B·(L·H + C)·float_width."""
    return B * (L * H + C) * float_width


def full_activation_record_bytes(
    L: int, L_seq: int, H: int, C: int, B: int, float_width: int = 4
) -> int:
    """Float payload of one full-activation record: B·(L·L_seq·H + C)·float_width."""
    return B * (L * L_seq * H + C) * float_width


def record_overhead_bytes(B: int) -> int:
    """Non-float bytes of a pivot record frame: envelope, header and sample ids."""
    return FRAME_OVERHEAD + RECORD_HEADER_SIZE + 8 * B


def full_record_overhead_bytes(B: int) -> int:
    return FRAME_OVERHEAD + FULL_RECORD_HEADER_SIZE + 12 * B


def _floats(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=WIRE_FLOAT).tobytes()


def _encode_record(msg: MsgActivationRecord) -> bytes:
    acts = np.asarray(msg.activations)
    dy = np.asarray(msg.delta_y)
    batch = len(msg.sample_ids)
    if acts.ndim != 3 or acts.shape[1] != batch or dy.ndim != 2 or dy.shape[0] != batch:
        raise MalformedPayloadError(
            f"record shapes inconsistent: activations {acts.shape}, delta_y {dy.shape}, {batch} ids"
        )
    layers, _, hidden = acts.shape
    return (
        _RECORD_HEADER.pack(
            msg.session_id, msg.epoch, msg.batch_index, batch, layers, hidden, dy.shape[1]
        )
        + struct.pack(f"<{batch}Q", *msg.sample_ids)
        + _floats(acts)
        + _floats(dy)
    )


def _encode_full_record(msg: MsgFullActivationRecord) -> bytes:
    hidden = np.asarray(msg.hidden_states)
    dy = np.asarray(msg.delta_y)
    batch = len(msg.sample_ids)
    if (
        hidden.ndim != 4
        or hidden.shape[1] != batch
        or len(msg.pivot_index) != batch
        or dy.ndim != 2
        or dy.shape[0] != batch
    ):
        raise MalformedPayloadError(
            f"full record shapes inconsistent: hidden {hidden.shape}, delta_y {dy.shape}"
        )
    layers, _, seq, width = hidden.shape
    return (
        _FULL_HEADER.pack(
            msg.session_id, msg.epoch, msg.batch_index, batch, layers, seq, width, dy.shape[1]
        )
        + struct.pack(f"<{batch}Q", *msg.sample_ids)
        + struct.pack(f"<{batch}I", *msg.pivot_index)
        + _floats(hidden)
        + _floats(dy)
    )


def encode_payload(msg: Message) -> bytes:
    """Payload bytes of ``msg`` without the frame envelope."""
    try:
        if isinstance(msg, MsgInit):
            return _INIT.pack(
                msg.session_id,
                msg.num_layers,
                msg.hidden_size,
                msg.num_classes,
                ARCH_CODES[msg.arch_kind],
                msg.bottleneck,
                msg.learning_rate,
                OPTIMIZER_CODES[msg.optimizer],
                msg.adam_beta1,
                msg.adam_beta2,
                msg.adam_eps,
                msg.side_seed,
                NONLINEARITY_CODES[msg.nonlinearity],
                msg.dataset_size,
                msg.batch_size,
            )
        if isinstance(msg, MsgActivationRecord):
            return _encode_record(msg)
        if isinstance(msg, MsgFullActivationRecord):
            return _encode_full_record(msg)
        if isinstance(msg, MsgEpochDone):
            return _EPOCH_DONE.pack(msg.session_id, msg.sample_count)
        if isinstance(msg, MsgTrainStatus):
            return _TRAIN_STATUS.pack(msg.epoch, msg.mean_loss, msg.step_count)
        if isinstance(msg, MsgDeploySideNet):
            return bytes(msg.side_network)
        if isinstance(msg, MsgAck):
            return _ACK.pack(int(msg.acked_type), msg.batch_index)
        if isinstance(msg, MsgError):
            return _ERROR.pack(int(msg.code)) + msg.message.encode("utf-8")
    except struct.error as e:
        raise MalformedPayloadError(f"cannot encode {type(msg).__name__}: {e}") from e
    raise MalformedPayloadError(f"not a protocol message: {type(msg).__name__}")


def encode(msg: Message) -> bytes:
    """Frame ``msg`` for the wire."""
    payload = encode_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise FrameTooLargeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    msg_type = int(msg.msg_type)
    crc = zlib.crc32(bytes([msg_type]) + payload)
    return _HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload + _CRC.pack(crc)


def parse_header(header: bytes) -> tuple[int, int]:
    """Validate a frame header and return (msg_type, payload_len)."""
    if len(header) < HEADER_SIZE:
        raise TruncatedFrameError(f"frame header needs {HEADER_SIZE} bytes, got {len(header)}")
    magic, version, msg_type, payload_len = _HEADER.unpack_from(header, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported protocol version {version}")
    if payload_len > MAX_PAYLOAD:
        raise FrameTooLargeError(f"declared payload of {payload_len} bytes exceeds {MAX_PAYLOAD}")
    return msg_type, payload_len


def _array(payload: bytes, offset: int, shape: tuple[int, ...]) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape))
    arr = np.frombuffer(payload, dtype=WIRE_FLOAT, count=count, offset=offset)
    return arr.astype(np.float32).reshape(shape), offset + count * WIRE_FLOAT.itemsize


def _expect_length(payload: bytes, expected: int, what: str) -> None:
    if len(payload) != expected:
        raise MalformedPayloadError(f"{what} payload is {len(payload)} bytes, expected {expected}")


def _decode_record(payload: bytes) -> MsgActivationRecord:
    session_id, epoch, batch_index, batch, layers, hidden, classes = _RECORD_HEADER.unpack_from(
        payload, 0
    )
    expected = RECORD_HEADER_SIZE + 8 * batch + activation_record_bytes(layers, hidden, classes, batch)
    _expect_length(payload, expected, "activation record")
    offset = RECORD_HEADER_SIZE
    ids = struct.unpack_from(f"<{batch}Q", payload, offset)
    offset += 8 * batch
    acts, offset = _array(payload, offset, (layers, batch, hidden))
    dy, _ = _array(payload, offset, (batch, classes))
    return MsgActivationRecord(session_id, epoch, batch_index, tuple(ids), acts, dy)


def _decode_full_record(payload: bytes) -> MsgFullActivationRecord:
    session_id, epoch, batch_index, batch, layers, seq, hidden, classes = _FULL_HEADER.unpack_from(
        payload, 0
    )
    expected = (
        FULL_RECORD_HEADER_SIZE
        + 12 * batch
        + full_activation_record_bytes(layers, seq, hidden, classes, batch)
    )
    _expect_length(payload, expected, "full activation record")
    offset = FULL_RECORD_HEADER_SIZE
    ids = struct.unpack_from(f"<{batch}Q", payload, offset)
    offset += 8 * batch
    pivots = struct.unpack_from(f"<{batch}I", payload, offset)
    offset += 4 * batch
    states, offset = _array(payload, offset, (layers, batch, seq, hidden))
    dy, _ = _array(payload, offset, (batch, classes))
    return MsgFullActivationRecord(
        session_id, epoch, batch_index, tuple(ids), tuple(pivots), states, dy
    )


def decode_payload(msg_type: int, payload: bytes) -> Message:
    try:
        kind = MsgType(msg_type)
    except ValueError as e:
        raise UnknownMessageTypeError(f"unknown message type {msg_type}") from e
    try:
        if kind is MsgType.INIT:
            _expect_length(payload, _INIT.size, "init")
            fields = list(_INIT.unpack(payload))
            fields[4] = decode_code(ARCH_CODES, fields[4], "architecture")
            fields[7] = decode_code(OPTIMIZER_CODES, fields[7], "optimizer")
            fields[12] = decode_code(NONLINEARITY_CODES, fields[12], "nonlinearity")
            return MsgInit(*fields)
        if kind is MsgType.ACTIVATION_RECORD:
            return _decode_record(payload)
        if kind is MsgType.FULL_ACTIVATION_RECORD:
            return _decode_full_record(payload)
        if kind is MsgType.EPOCH_DONE:
            _expect_length(payload, _EPOCH_DONE.size, "epoch done")
            return MsgEpochDone(*_EPOCH_DONE.unpack(payload))
        if kind is MsgType.TRAIN_STATUS:
            _expect_length(payload, _TRAIN_STATUS.size, "train status")
            return MsgTrainStatus(*_TRAIN_STATUS.unpack(payload))
        if kind is MsgType.DEPLOY_SIDE_NET:
            return MsgDeploySideNet(bytes(payload))
        if kind is MsgType.ACK:
            _expect_length(payload, _ACK.size, "ack")
            acked, batch_index = _ACK.unpack(payload)
            return MsgAck(MsgType(acked), batch_index)
        (code,) = _ERROR.unpack_from(payload, 0)
        return MsgError(ErrorCode(code), payload[_ERROR.size :].decode("utf-8"))
    except ProtocolError:
        raise
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise MalformedPayloadError(f"malformed {kind.name} payload: {e}") from e


def decode(frame: bytes) -> Message:
    """Parse one complete frame; every failure is a ``ProtocolError`` subclass."""
    frame = bytes(frame)
    msg_type, payload_len = parse_header(frame)
    total = FRAME_OVERHEAD + payload_len
    if len(frame) < total:
        raise TruncatedFrameError(f"frame needs {total} bytes, got {len(frame)}")
    if len(frame) > total:
        raise MalformedPayloadError(f"{len(frame) - total} trailing bytes after frame")
    payload = frame[HEADER_SIZE : HEADER_SIZE + payload_len]
    (crc,) = _CRC.unpack_from(frame, HEADER_SIZE + payload_len)
    if zlib.crc32(bytes([msg_type]) + payload) != crc:
        raise CrcMismatchError("frame checksum does not verify")
    return decode_payload(msg_type, payload)
