"""Append-only activation cache backed by a crash-safe log file.

The on-disk layout is normative; see CACHE.md. In short::

    header: "PAEC" | version u8 | session_id u64 | L u32 | H u32 | C u32 | dataset_size u64 | crc32 u32
    record: length u32 | crc32(body) u32 | body

A body starts with a kind byte: 1 for an activation record, 2 for the seal.
"""

import os
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

from ..errors import (
    CacheCorruptionError,
    CacheError,
    CountMismatchError,
    DimensionError,
    DuplicateSampleError,
    SealedCacheError,
)
from ..interfaces import DefaultLogger, LoggerInterface

CACHE_MAGIC = b"PAEC"
CACHE_VERSION = 1

_FILE_HEADER = struct.Struct("<4sBQIIIQ")
_PREFIX = struct.Struct("<II")
_RECORD_HEAD = struct.Struct("<BII")
_SEAL = struct.Struct("<BQ")
_CRC = struct.Struct("<I")

KIND_RECORD = 1
KIND_SEAL = 2
HEADER_SIZE = _FILE_HEADER.size + _CRC.size


@dataclass(frozen=True, eq=False)
class CacheRecord:
    """One epoch-1 batch as the server stored it.

    Attributes:
        batch_index: Position of the batch in epoch 1
        sample_ids: Device-assigned ids, length B
        activations: float32 [L, B, H]
        delta_y: float32 [B, C]
    """

    batch_index: int
    sample_ids: tuple[int, ...]
    activations: np.ndarray
    delta_y: np.ndarray

    def layer_blocks(self) -> list[np.ndarray]:
        """Per-layer [B, H] blocks widened to float64 for training."""
        return [self.activations[i].astype(np.float64) for i in range(self.activations.shape[0])]

    def target(self) -> np.ndarray:
        return self.delta_y.astype(np.float64)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.flags.writeable = False
    return arr


def _encode_record(record: CacheRecord) -> bytes:
    batch = len(record.sample_ids)
    return (
        _RECORD_HEAD.pack(KIND_RECORD, record.batch_index, batch)
        + struct.pack(f"<{batch}Q", *record.sample_ids)
        + record.activations.astype("<f4").tobytes()
        + record.delta_y.astype("<f4").tobytes()
    )


def _decode_record(body: bytes, layers: int, hidden: int, classes: int) -> CacheRecord:
    _, batch_index, batch = _RECORD_HEAD.unpack_from(body, 0)
    offset = _RECORD_HEAD.size
    expected = offset + 8 * batch + 4 * batch * (layers * hidden + classes)
    if len(body) != expected:
        raise ValueError(f"record body is {len(body)} bytes, expected {expected}")
    ids = struct.unpack_from(f"<{batch}Q", body, offset)
    offset += 8 * batch
    acts = np.frombuffer(body, "<f4", layers * batch * hidden, offset)
    offset += 4 * layers * batch * hidden
    dy = np.frombuffer(body, "<f4", batch * classes, offset)
    return CacheRecord(
        batch_index=batch_index,
        sample_ids=tuple(ids),
        activations=_readonly(acts.reshape(layers, batch, hidden)),
        delta_y=_readonly(dy.reshape(batch, classes)),
    )


class ActivationCache:
    """Ordered store of epoch-1 records: append-only until sealed, read-only after."""

    def __init__(
        self,
        path: Path,
        session_id: int,
        num_layers: int,
        hidden_size: int,
        num_classes: int,
        dataset_size: int,
        *,
        fsync: bool = False,
        logger: LoggerInterface = DefaultLogger("pae.cache"),
    ):
        self.path = path
        self.session_id = session_id
        self.num_layers = num_layers
        self.hidden_size = hidden_size
        self.num_classes = num_classes
        self.dataset_size = dataset_size
        self.fsync = fsync
        self.logger = logger
        self.truncated_bytes = 0
        self._records: list[CacheRecord] = []
        self._by_batch: dict[int, CacheRecord] = {}
        self._sample_ids: set[int] = set()
        self._sealed = False
        self._lock = threading.Lock()
        self._file: Optional[BinaryIO] = None

    @classmethod
    def create(
        cls,
        path: Path,
        session_id: int,
        num_layers: int,
        hidden_size: int,
        num_classes: int,
        dataset_size: int,
        *,
        fsync: bool = False,
        logger: LoggerInterface = DefaultLogger("pae.cache"),
    ) -> "ActivationCache":
        """Start a fresh log at ``path``, replacing any previous file."""
        cache = cls(
            path,
            session_id,
            num_layers,
            hidden_size,
            num_classes,
            dataset_size,
            fsync=fsync,
            logger=logger,
        )
        path.parent.mkdir(parents=True, exist_ok=True)
        header = _FILE_HEADER.pack(
            CACHE_MAGIC,
            CACHE_VERSION,
            session_id,
            num_layers,
            hidden_size,
            num_classes,
            dataset_size,
        )
        cache._file = open(path, "wb")
        cache._write_raw(header + _CRC.pack(zlib.crc32(header)))
        logger.debug(f"cache created at {path}")
        return cache

    @classmethod
    def recover(
        cls,
        path: Path,
        *,
        fsync: bool = False,
        logger: LoggerInterface = DefaultLogger("pae.cache"),
    ) -> "ActivationCache":
        """Rebuild a cache from its log.

        A torn tail record (short prefix, short body, or a bad checksum on the
        final record) is cut off with a warning. A bad checksum anywhere
        before the tail raises ``CacheCorruptionError`` with the record index.

        Raises:
            CacheError: If the file header is unreadable
            CacheCorruptionError: If a non-tail record fails verification
        """
        data = path.read_bytes()
        if len(data) < HEADER_SIZE:
            raise CacheError(f"{path}: file too short for a cache header")
        header = data[: _FILE_HEADER.size]
        (crc,) = _CRC.unpack_from(data, _FILE_HEADER.size)
        magic, version, session_id, layers, hidden, classes, dataset_size = _FILE_HEADER.unpack(
            header
        )
        if magic != CACHE_MAGIC or zlib.crc32(header) != crc:
            raise CacheError(f"{path}: not a valid activation cache header")
        if version != CACHE_VERSION:
            raise CacheError(f"{path}: unsupported cache version {version}")

        cache = cls(
            path,
            session_id,
            layers,
            hidden,
            classes,
            dataset_size,
            fsync=fsync,
            logger=logger,
        )
        offset = HEADER_SIZE
        index = 0
        while offset < len(data):
            if len(data) - offset < _PREFIX.size:
                break
            length, crc = _PREFIX.unpack_from(data, offset)
            end = offset + _PREFIX.size + length
            if end > len(data):
                break
            body = data[offset + _PREFIX.size : end]
            if zlib.crc32(body) != crc:
                if end == len(data):
                    break
                raise CacheCorruptionError(index, "checksum mismatch")
            if cache._sealed:
                raise CacheCorruptionError(index, "record after seal")
            try:
                if body[:1] == bytes([KIND_SEAL]):
                    _, count = _SEAL.unpack(body)
                    if count != cache.sample_count:
                        raise ValueError(f"seal count {count} != cached {cache.sample_count}")
                    cache._sealed = True
                else:
                    cache._index(_decode_record(body, layers, hidden, classes))
            except (struct.error, ValueError, CacheError) as e:
                raise CacheCorruptionError(index, str(e)) from e
            offset = end
            index += 1

        if offset < len(data):
            cache.truncated_bytes = len(data) - offset
            logger.warning(
                f"cache {path}: dropped torn tail record {index} "
                f"({cache.truncated_bytes} bytes); {len(cache._records)} records recovered"
            )
        handle = open(path, "r+b")
        handle.truncate(offset)
        handle.seek(offset)
        cache._file = handle
        return cache

    @property
    def sealed(self) -> bool:
        return self._sealed

    @property
    def sample_count(self) -> int:
        return len(self._sample_ids)

    @property
    def records(self) -> tuple[CacheRecord, ...]:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def get(self, batch_index: int) -> Optional[CacheRecord]:
        return self._by_batch.get(batch_index)

    def _index(self, record: CacheRecord) -> None:
        self._records.append(record)
        self._by_batch[record.batch_index] = record
        self._sample_ids.update(record.sample_ids)

    def _write_raw(self, data: bytes) -> None:
        if self._file is None:
            raise CacheError(f"cache {self.path} is closed")
        self._file.write(data)
        self._file.flush()
        if self.fsync:
            os.fsync(self._file.fileno())

    def _write_body(self, body: bytes) -> None:
        self._write_raw(_PREFIX.pack(len(body), zlib.crc32(body)) + body)

    def append(
        self,
        batch_index: int,
        sample_ids: tuple[int, ...],
        activations: np.ndarray,
        delta_y: np.ndarray,
    ) -> CacheRecord:
        """Persist one record and index it.

        Raises:
            SealedCacheError: If the cache is sealed
            DimensionError: If shapes disagree with the cache header
            DuplicateSampleError: If a sample id or batch index is already cached
        """
        batch = len(sample_ids)
        expected_acts = (self.num_layers, batch, self.hidden_size)
        if np.shape(activations) != expected_acts or np.shape(delta_y) != (
            batch,
            self.num_classes,
        ):
            raise DimensionError(
                f"record shapes {np.shape(activations)}, {np.shape(delta_y)} do not match "
                f"cache layout {expected_acts}, ({batch}, {self.num_classes})"
            )
        record = CacheRecord(
            batch_index=batch_index,
            sample_ids=tuple(int(i) for i in sample_ids),
            activations=_readonly(activations),
            delta_y=_readonly(delta_y),
        )
        with self._lock:
            if self._sealed:
                raise SealedCacheError(f"cache for session {self.session_id} is sealed")
            if batch_index in self._by_batch:
                raise DuplicateSampleError(f"batch {batch_index} is already cached")
            if len(set(record.sample_ids)) != batch:
                raise DuplicateSampleError(f"batch {batch_index} repeats a sample id")
            clash = self._sample_ids.intersection(record.sample_ids)
            if clash:
                raise DuplicateSampleError(f"sample id {min(clash)} is already cached")
            self._write_body(_encode_record(record))
            self._index(record)
        return record

    def seal(self, sample_count: int) -> None:
        """Close the cache for writing.

        Raises:
            CountMismatchError: If ``sample_count`` differs from the cached or announced count
        """
        with self._lock:
            if self._sealed:
                raise SealedCacheError(f"cache for session {self.session_id} is already sealed")
            if sample_count != self.sample_count or sample_count != self.dataset_size:
                raise CountMismatchError(
                    f"sealing with {sample_count} samples, cached {self.sample_count}, "
                    f"announced {self.dataset_size}"
                )
            self._write_body(_SEAL.pack(KIND_SEAL, sample_count))
            self._sealed = True

    def close(self) -> None:
        with self._lock:
            if self._file is not None:
                self._file.close()
                self._file = None
