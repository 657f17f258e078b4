"""Dense float64 arithmetic with a fixed accumulation order, plus a seeded RNG.

Every reduction on the forward and backward paths goes through ``matmul`` or
``ordered_sum``. Both accumulate strictly left to right along the reduced axis,
so a sample's result never depends on the batch it was computed in or on the
memory layout of its inputs.
"""

import math
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DimensionError
from .model import Nonlinearity

Tensor = NDArray[np.float64]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def as_tensor(x: ArrayLike) -> Tensor:
    """Return a C-contiguous float64 copy of ``x``."""
    return np.array(x, dtype=np.float64, order="C", copy=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast.

    The inner dimension is accumulated one rank-1 update at a time, k = 0..K-1.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    try:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise DimensionError(f"batch dimensions do not broadcast: {a.shape} x {b.shape}") from e
    out = np.zeros(lead + (a.shape[-2], b.shape[-1]), dtype=np.float64)
    for k in range(a.shape[-1]):
        out += a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return out


def ordered_sum(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Sum along ``axis`` left to right."""
    moved = np.moveaxis(x, axis, -1)
    if moved.shape[-1] == 0:
        raise DimensionError("cannot reduce an empty axis")
    acc = np.array(moved[..., 0], dtype=np.float64, copy=True)
    for j in range(1, moved.shape[-1]):
        acc += moved[..., j]
    if keepdims:
        acc = np.expand_dims(acc, axis)
    return acc


def ordered_mean(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return ordered_sum(x, axis, keepdims) / x.shape[axis]


def sigmoid(x: Union[float, Tensor]) -> Union[float, Tensor]:
    """Logistic function, computed on the side that cannot overflow."""
    if np.ndim(x) == 0:
        v = float(x)  # type: ignore[arg-type]
        if v >= 0:
            return 1.0 / (1.0 + math.exp(-v))
        e = math.exp(v)
        return e / (1.0 + e)
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softmax(v: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / ordered_sum(e, -1, keepdims=True)


def nonlinearity(x: Tensor, kind: Nonlinearity = Nonlinearity.RELU) -> Tensor:
    """Elementwise σ used by adapters (ReLU unless configured otherwise)."""
    if kind is Nonlinearity.RELU:
        return np.maximum(x, 0.0)
    if kind is Nonlinearity.GELU:
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x**3)))
    if kind is Nonlinearity.TANH:
        return np.tanh(x)
    raise ValueError(f"Unknown nonlinearity: {kind}")


def nonlinearity_grad(x: Tensor, kind: Nonlinearity = Nonlinearity.RELU) -> Tensor:
    """Derivative of ``nonlinearity`` with respect to its input, evaluated at ``x``."""
    if kind is Nonlinearity.RELU:
        return (x > 0).astype(np.float64)
    if kind is Nonlinearity.GELU:
        t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (
            1.0 + 3.0 * _GELU_K * x * x
        )
    if kind is Nonlinearity.TANH:
        t = np.tanh(x)
        return 1.0 - t * t
    raise ValueError(f"Unknown nonlinearity: {kind}")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mean = ordered_mean(x, -1, keepdims=True)
    centered = x - mean
    var = ordered_mean(centered * centered, -1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


class SeededRng:
    """Reproducible random stream: numpy ``Generator`` over ``PCG64``.

    A stream is identified by ``seed`` and an optional tuple of integer keys;
    ``child`` derives an independent stream without consuming this one.
    """

    ALGORITHM = "PCG64"

    def __init__(self, seed: int, *keys: int):
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.keys = tuple(keys)
        sequence = np.random.SeedSequence(seed, spawn_key=self.keys)
        self._gen = np.random.Generator(np.random.PCG64(sequence))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, *self.keys, *keys)

    def normal(self, shape: tuple[int, ...], std: float = 1.0) -> Tensor:
        return self._gen.standard_normal(shape) * std

    def uniform(self, low: float, high: float, shape: tuple[int, ...]) -> Tensor:
        return self._gen.uniform(low, high, shape)

    def open_uniform(self, shape: tuple[int, ...]) -> Tensor:
        """Uniform on the open interval (-1, 1)."""
        out = self._gen.uniform(-1.0, 1.0, shape)
        while np.any(out == -1.0):
            hits = out == -1.0
            out[hits] = self._gen.uniform(-1.0, 1.0, int(hits.sum()))
        return out

    def integers(self, high: int, size: Union[int, tuple[int, ...], None] = None):
        return self._gen.integers(0, high, size=size)

    def permutation(self, n: int) -> NDArray[np.int64]:
        return self._gen.permutation(n)

    def bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)
