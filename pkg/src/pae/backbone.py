"""Frozen pre-norm transformer that runs forward-only on the device."""

import math
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, DimensionError, InputError
from .model import ARCH_CODES, ArchKind, BackboneConfig, Nonlinearity, decode_code
from .numerics import (
    SeededRng,
    Tensor,
    layer_norm,
    matmul,
    nonlinearity,
    softmax,
)

WEIGHTS_MAGIC = b"PAEW"
WEIGHTS_VERSION = 1
_CONFIG_STRUCT = struct.Struct("<IIIIIIBQ")
_MASKED_SCORE = -1e30

INIT_STD = 0.02


@dataclass(frozen=True)
class LayerWeights:
    """Weights of one transformer block, in declared (serialization) order."""

    ln1_gain: Tensor
    ln1_bias: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor


@dataclass(frozen=True)
class BackboneModel:
    """Immutable backbone; every array is read-only."""

    config: BackboneConfig
    token_embedding: Tensor
    position_embedding: Tensor
    layers: tuple[LayerWeights, ...]
    final_gain: Tensor
    final_bias: Tensor
    head_weight: Tensor
    head_bias: Tensor


@dataclass(frozen=True)
class ForwardTrace:
    """Per-layer hidden states and the pretrained prediction.

    Attributes:
        hidden_states: L tensors of shape [B, L_seq, H], output of each block
        y_pre: Softmax probabilities [B, C] from the pivot token's final state
    """

    hidden_states: list[Tensor]
    y_pre: Tensor


def _layer_shapes(config: BackboneConfig) -> list[tuple[str, tuple[int, ...]]]:
    h = config.hidden_size
    f = 4 * h
    return [
        ("ln1_gain", (h,)),
        ("ln1_bias", (h,)),
        ("w_q", (h, h)),
        ("w_k", (h, h)),
        ("w_v", (h, h)),
        ("w_o", (h, h)),
        ("ln2_gain", (h,)),
        ("ln2_bias", (h,)),
        ("w_ff1", (h, f)),
        ("b_ff1", (f,)),
        ("w_ff2", (f, h)),
        ("b_ff2", (h,)),
    ]


def backbone_parameter_count(config: BackboneConfig) -> int:
    """Number of scalar weights in the backbone layout."""
    h = config.hidden_size
    per_layer = sum(math.prod(shape) for _, shape in _layer_shapes(config))
    return (
        config.vocab_size * h
        + config.seq_len * h
        + config.num_layers * per_layer
        + 2 * h
        + h * config.num_classes
        + config.num_classes
    )


def _freeze(arr: Tensor) -> Tensor:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def build_backbone(config: BackboneConfig) -> BackboneModel:
    """Synthesize a pretrained-style backbone deterministically from ``init_seed``.

    Token embeddings are unit normal, positions N(0, 0.1²); query/key and
    residual-output projections use the 0.02 initializer range (the FFN output
    is further scaled by 1/sqrt(2L)); value, attention-output and FFN-input
    projections use 1/sqrt(H). Norm gains are 1 and every bias is 0.
    """
    config.validate()
    rng = SeededRng(config.init_seed)
    h = config.hidden_size
    fan = 1.0 / math.sqrt(h)
    stds = {
        "w_q": INIT_STD,
        "w_k": INIT_STD,
        "w_v": fan,
        "w_o": fan,
        "w_ff1": fan,
        "w_ff2": INIT_STD / math.sqrt(2 * config.num_layers),
    }

    token_embedding = rng.normal((config.vocab_size, h))
    position_embedding = rng.normal((config.seq_len, h), 0.1)
    layers = []
    for _ in range(config.num_layers):
        values = {}
        for name, shape in _layer_shapes(config):
            if name in stds:
                values[name] = _freeze(rng.normal(shape, stds[name]))
            elif name.endswith("gain"):
                values[name] = _freeze(np.ones(shape))
            else:
                values[name] = _freeze(np.zeros(shape))
        layers.append(LayerWeights(**values))
    head_weight = rng.normal((h, config.num_classes), INIT_STD)

    return BackboneModel(
        config=config,
        token_embedding=_freeze(token_embedding),
        position_embedding=_freeze(position_embedding),
        layers=tuple(layers),
        final_gain=_freeze(np.ones(h)),
        final_bias=_freeze(np.zeros(h)),
        head_weight=_freeze(head_weight),
        head_bias=_freeze(np.zeros(config.num_classes)),
    )


def _check_inputs(model: BackboneModel, tokens: NDArray, pad_mask: NDArray) -> None:
    config = model.config
    if tokens.ndim != 2 or tokens.shape != pad_mask.shape:
        raise DimensionError(
            f"tokens {tokens.shape} and pad_mask {pad_mask.shape} must be equal 2-D shapes"
        )
    if tokens.shape[1] > config.seq_len:
        raise DimensionError(
            f"sequence length {tokens.shape[1]} exceeds configured {config.seq_len}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise InputError(f"token ids must lie in [0, {config.vocab_size})")


def forward(model: BackboneModel, tokens: NDArray, pad_mask: NDArray) -> ForwardTrace:
    """Run the frozen backbone.

    Args:
        model: Backbone to run
        tokens: Integer token ids [B, L_seq]
        pad_mask: Boolean [B, L_seq], True at real tokens and False at padding

    Returns:
        ForwardTrace with every layer's hidden state and y_pre
    """
    tokens = np.asarray(tokens)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    _check_inputs(model, tokens, pad_mask)
    config = model.config
    batch, seq = tokens.shape
    heads = config.num_heads
    head_dim = config.hidden_size // heads

    allowed = np.broadcast_to(pad_mask[:, None, :], (batch, seq, seq))
    if config.arch_kind is ArchKind.AUTOREGRESSIVE:
        allowed = allowed & np.tril(np.ones((seq, seq), dtype=bool))[None, :, :]
    blocked = ~allowed[:, None, :, :]

    def split_heads(x: Tensor) -> Tensor:
        return x.reshape(batch, seq, heads, head_dim).transpose(0, 2, 1, 3)

    x = model.token_embedding[tokens] + model.position_embedding[:seq]
    hidden_states = []
    for layer in model.layers:
        a = layer_norm(x, layer.ln1_gain, layer.ln1_bias)
        q = split_heads(matmul(a, layer.w_q))
        k = split_heads(matmul(a, layer.w_k))
        v = split_heads(matmul(a, layer.w_v))
        scores = matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(head_dim)
        scores = np.where(blocked, _MASKED_SCORE, scores)
        context = matmul(softmax(scores), v)
        context = context.transpose(0, 2, 1, 3).reshape(batch, seq, config.hidden_size)
        x = x + matmul(context, layer.w_o)

        f = layer_norm(x, layer.ln2_gain, layer.ln2_bias)
        inner = nonlinearity(matmul(f, layer.w_ff1) + layer.b_ff1, Nonlinearity.GELU)
        x = x + matmul(inner, layer.w_ff2) + layer.b_ff2
        hidden_states.append(x)

    pivot = select_pivot(hidden_states[-1], config.arch_kind, pad_mask)
    normed = layer_norm(pivot, model.final_gain, model.final_bias)
    y_pre = softmax(matmul(normed, model.head_weight) + model.head_bias)
    return ForwardTrace(hidden_states=hidden_states, y_pre=y_pre)


def pivot_indices(arch_kind: ArchKind, pad_mask: NDArray) -> NDArray[np.int64]:
    """Position of the pivot token for every sample."""
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if pad_mask.ndim != 2:
        raise DimensionError(f"pad_mask must be 2-D, got {pad_mask.shape}")
    empty = ~pad_mask.any(axis=1)
    if empty.any():
        raise InputError(f"sample {int(np.argmax(empty))} is all padding")
    if arch_kind is ArchKind.AUTOENCODING:
        return np.zeros(pad_mask.shape[0], dtype=np.int64)
    seq = pad_mask.shape[1]
    return (seq - 1 - np.argmax(pad_mask[:, ::-1], axis=1)).astype(np.int64)


def select_pivot(hidden: Tensor, arch_kind: ArchKind, pad_mask: NDArray) -> Tensor:
    """Gather the pivot token's hidden vector: [B, L_seq, H] -> [B, H].

    Autoregressive backbones use the last non-padding token, autoencoding
    backbones the [CLS] slot at position 0.
    """
    if hidden.ndim != 3 or hidden.shape[:2] != np.shape(pad_mask):
        raise DimensionError(
            f"hidden {hidden.shape} is inconsistent with pad_mask {np.shape(pad_mask)}"
        )
    idx = pivot_indices(arch_kind, pad_mask)
    return np.ascontiguousarray(hidden[np.arange(hidden.shape[0]), idx])


def pivot_activations(model: BackboneModel, trace: ForwardTrace, pad_mask: NDArray) -> Tensor:
    """Stack every layer's pivot activation into [L, B, H]."""
    return np.stack(
        [select_pivot(h, model.config.arch_kind, pad_mask) for h in trace.hidden_states]
    )


def iter_weights(model: BackboneModel) -> Iterator[Tensor]:
    """Yield weight arrays in the declared serialization order."""
    yield model.token_embedding
    yield model.position_embedding
    for layer in model.layers:
        for field in fields(LayerWeights):
            yield getattr(layer, field.name)
    yield model.final_gain
    yield model.final_bias
    yield model.head_weight
    yield model.head_bias


def save_weights(model: BackboneModel, path: Path) -> None:
    """Write the backbone in the PAEW layout (float32 buffers, CRC32 trailer)."""
    c = model.config
    body = bytearray(WEIGHTS_MAGIC)
    body.append(WEIGHTS_VERSION)
    body += _CONFIG_STRUCT.pack(
        c.num_layers,
        c.hidden_size,
        c.num_heads,
        c.seq_len,
        c.vocab_size,
        c.num_classes,
        ARCH_CODES[c.arch_kind],
        c.init_seed,
    )
    for arr in iter_weights(model):
        body += arr.astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    path.write_bytes(bytes(body))


def load_weights(path: Path) -> BackboneModel:
    """Read a PAEW file; weights are widened to float64 and frozen."""
    data = path.read_bytes()
    header_len = len(WEIGHTS_MAGIC) + 1 + _CONFIG_STRUCT.size
    if len(data) < header_len + 4 or data[:4] != WEIGHTS_MAGIC:
        raise ConfigError(f"{path} is not a PAEW weight file")
    if data[4] != WEIGHTS_VERSION:
        raise ConfigError(f"{path}: unsupported weight file version {data[4]}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ConfigError(f"{path}: checksum mismatch")
    layers, hidden, heads, seq, vocab, classes, arch, seed = _CONFIG_STRUCT.unpack_from(data, 5)
    try:
        arch_kind = decode_code(ARCH_CODES, arch, "architecture")
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e
    config = BackboneConfig(
        num_layers=layers,
        hidden_size=hidden,
        num_heads=heads,
        seq_len=seq,
        vocab_size=vocab,
        num_classes=classes,
        arch_kind=arch_kind,
        init_seed=seed,
    )
    config.validate()

    floats = np.frombuffer(data, dtype="<f4", offset=header_len, count=(len(data) - header_len - 4) // 4)
    if floats.size != backbone_parameter_count(config):
        raise ConfigError(
            f"{path}: expected {backbone_parameter_count(config)} weights, found {floats.size}"
        )
    offset = 0

    def take(shape: tuple[int, ...]) -> Tensor:
        nonlocal offset
        n = math.prod(shape)
        arr = floats[offset : offset + n].astype(np.float64).reshape(shape)
        offset += n
        return _freeze(arr)

    h = config.hidden_size
    token_embedding = take((vocab, h))
    position_embedding = take((seq, h))
    layer_list = []
    for _ in range(layers):
        layer_list.append(LayerWeights(**{name: take(shape) for name, shape in _layer_shapes(config)}))
    return BackboneModel(
        config=config,
        token_embedding=token_embedding,
        position_embedding=position_embedding,
        layers=tuple(layer_list),
        final_gain=take((h,)),
        final_bias=take((h,)),
        head_weight=take((h, classes)),
        head_bias=take((classes,)),
    )
