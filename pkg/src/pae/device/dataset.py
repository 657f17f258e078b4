"""Device-local datasets. Tokens and labels never leave this process."""

import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import NDArray

from ..config import RunConfig
from ..errors import InputError
from ..model import CLS_TOKEN, PAD_TOKEN, RESERVED_TOKENS, ArchKind
from ..numerics import SeededRng
from ..privacy import one_hot

DEFAULT_MARKERS = (RESERVED_TOKENS,)


class DatasetSource(Enum):
    SYNTHETIC = "synthetic"
    DELIMITED_FILE = "delimited-file"


@dataclass(frozen=True, eq=False)
class Sample:
    sample_id: int
    tokens: NDArray[np.int64]
    pad_mask: NDArray[np.bool_]
    label: int


@dataclass(frozen=True)
class Batch:
    """Stacked samples ready for a backbone forward pass."""

    sample_ids: tuple[int, ...]
    tokens: NDArray[np.int64]
    pad_mask: NDArray[np.bool_]
    labels: NDArray[np.float64]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labelled token sequences of a fixed length.

    Attributes:
        samples: Samples in id order
        num_classes: Label space C
        seq_len: Padded sequence length L_seq
        vocab_size: Token ids lie in [0, vocab_size)
        source: Where the samples came from
        origin: Seed or file path, for logs
    """

    samples: tuple[Sample, ...]
    num_classes: int
    seq_len: int
    vocab_size: int
    source: DatasetSource
    origin: str = ""

    def __post_init__(self) -> None:
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise InputError("sample ids must be unique")
        for s in self.samples:
            if not 0 <= s.label < self.num_classes:
                raise InputError(f"sample {s.sample_id}: label {s.label} outside [0, {self.num_classes})")
            if s.tokens.size and (s.tokens.min() < 0 or s.tokens.max() >= self.vocab_size):
                raise InputError(f"sample {s.sample_id}: token id outside [0, {self.vocab_size})")

    def __len__(self) -> int:
        return len(self.samples)

    def num_batches(self, batch_size: int) -> int:
        return -(-len(self.samples) // batch_size)

    def stack(self, samples: Sequence[Sample]) -> Batch:
        return Batch(
            sample_ids=tuple(s.sample_id for s in samples),
            tokens=np.stack([s.tokens for s in samples]),
            pad_mask=np.stack([s.pad_mask for s in samples]),
            labels=one_hot([s.label for s in samples], self.num_classes),
        )

    def batches(self, batch_size: int) -> Iterator[Batch]:
        """Consecutive batches in sample order; the last one may be short."""
        if batch_size < 1:
            raise InputError(f"batch_size must be positive, got {batch_size}")
        for start in range(0, len(self.samples), batch_size):
            yield self.stack(self.samples[start : start + batch_size])


def marker_label(tokens: NDArray[np.int64], markers: Sequence[int], num_classes: int) -> int:
    """(count of marker tokens) mod C."""
    return int(np.isin(tokens, markers).sum()) % num_classes


def synth_dataset(
    seed: int,
    n: int,
    seq_len: int,
    vocab_size: int,
    num_classes: int,
    *,
    arch_kind: ArchKind = ArchKind.AUTOREGRESSIVE,
    markers: Sequence[int] = DEFAULT_MARKERS,
) -> Dataset:
    """Deterministic marker-counting task.

    Every sample is a full-length sequence of non-marker filler tokens with
    k marker tokens at distinct random positions, k uniform on {0, ..., C-1}.
    Autoencoding samples start with [CLS]. The label is computed from the
    tokens themselves.

    Raises:
        InputError: If the vocabulary or sequence cannot hold the task
    """
    if num_classes < 1 or num_classes > vocab_size:
        raise InputError(f"need 1 <= C <= vocab_size, got C={num_classes}, vocab={vocab_size}")
    if any(not RESERVED_TOKENS <= m < vocab_size for m in markers):
        raise InputError(f"marker tokens must lie in [{RESERVED_TOKENS}, {vocab_size})")
    filler = np.array(
        [t for t in range(RESERVED_TOKENS, vocab_size) if t not in set(markers)], dtype=np.int64
    )
    if filler.size == 0:
        raise InputError("vocabulary has no room for filler tokens")
    offset = 1 if arch_kind is ArchKind.AUTOENCODING else 0
    free = seq_len - offset
    if free < num_classes - 1:
        raise InputError(f"seq_len {seq_len} cannot hold {num_classes - 1} markers")

    marker_ids = np.asarray(markers, dtype=np.int64)
    samples = []
    for i in range(n):
        rng = SeededRng(seed, i)
        tokens = filler[rng.integers(filler.size, seq_len)].astype(np.int64)
        if offset:
            tokens[0] = CLS_TOKEN
        k = int(rng.integers(num_classes))
        if k:
            positions = offset + rng.permutation(free)[:k]
            tokens[positions] = marker_ids[rng.integers(marker_ids.size, k)]
        samples.append(
            Sample(
                sample_id=i,
                tokens=tokens,
                pad_mask=np.ones(seq_len, dtype=bool),
                label=marker_label(tokens, markers, num_classes),
            )
        )
    return Dataset(
        samples=tuple(samples),
        num_classes=num_classes,
        seq_len=seq_len,
        vocab_size=vocab_size,
        source=DatasetSource.SYNTHETIC,
        origin=f"seed={seed}",
    )


def token_id(token: str, vocab_size: int) -> int:
    """Stable hash into the ordinary id range [2, vocab_size)."""
    return zlib.crc32(token.encode("utf-8")) % (vocab_size - RESERVED_TOKENS) + RESERVED_TOKENS


def encode_text(
    text: str, seq_len: int, vocab_size: int, arch_kind: ArchKind
) -> tuple[NDArray[np.int64], NDArray[np.bool_]]:
    """Whitespace tokens, hashed, truncated or right-padded to ``seq_len``."""
    ids = [token_id(t, vocab_size) for t in text.split()]
    if arch_kind is ArchKind.AUTOENCODING:
        ids = [CLS_TOKEN] + ids
    ids = ids[:seq_len]
    tokens = np.full(seq_len, PAD_TOKEN, dtype=np.int64)
    tokens[: len(ids)] = ids
    mask = np.zeros(seq_len, dtype=bool)
    mask[: len(ids)] = True
    return tokens, mask


def ingest_delimited(
    path: Path,
    num_classes: int,
    vocab_size: int,
    seq_len: int,
    *,
    arch_kind: ArchKind = ArchKind.AUTOREGRESSIVE,
) -> Dataset:
    """Read ``label<TAB>text`` rows; blank lines are skipped.

    Raises:
        InputError: For a malformed row, a label outside [0, C) or empty text,
            naming the line number
    """
    if vocab_size <= RESERVED_TOKENS:
        raise InputError(f"vocab_size must exceed {RESERVED_TOKENS}")
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            label_text, sep, text = line.partition("\t")
            if not sep:
                raise InputError(f"{path}:{lineno}: expected label<TAB>text")
            try:
                label = int(label_text.strip())
            except ValueError as e:
                raise InputError(f"{path}:{lineno}: label {label_text!r} is not an integer") from e
            if not 0 <= label < num_classes:
                raise InputError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
            if not text.split():
                raise InputError(f"{path}:{lineno}: empty text would be all padding")
            tokens, mask = encode_text(text, seq_len, vocab_size, arch_kind)
            samples.append(Sample(len(samples), tokens, mask, label))
    return Dataset(
        samples=tuple(samples),
        num_classes=num_classes,
        seq_len=seq_len,
        vocab_size=vocab_size,
        source=DatasetSource.DELIMITED_FILE,
        origin=str(path),
    )


def dataset_from_config(config: RunConfig) -> Dataset:
    """The synthetic task or a delimited file, as ``config.data`` selects."""
    if config.data == "synthetic":
        return synth_dataset(
            config.data_seed,
            config.dataset_size,
            config.seq_len,
            config.vocab_size,
            config.num_classes,
            arch_kind=config.arch_kind,
        )
    return ingest_delimited(
        Path(config.data),
        config.num_classes,
        config.vocab_size,
        config.seq_len,
        arch_kind=config.arch_kind,
    )
