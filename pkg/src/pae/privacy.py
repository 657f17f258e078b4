"""Device-secret nonce, masked delta targets and output fusion.

The device never sends labels. It sends Δy = Label - y_pre + R, where R is a
per-session secret drawn from (-1, 1)^C, and after deployment it recovers
y_output = y_pre + y_side - R locally.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError
from .numerics import SeededRng, Tensor


@dataclass(frozen=True)
class NonceKey:
    """Session secret R. Persisted only in the device's own session directory.

    Attributes:
        values: R, shape [C], every entry in (-1, 1)
        session_id: Fine-tuning session the key belongs to
        rng_seed: Seed the key was drawn from
    """

    values: Tensor
    session_id: int
    rng_seed: int

    def __repr__(self) -> str:
        return f"NonceKey(session_id={self.session_id}, classes={self.values.size}, values=<secret>)"


def generate_nonce(num_classes: int, seed: int, session_id: int = 0) -> NonceKey:
    """Draw R i.i.d. uniform on (-1, 1) from a seeded stream."""
    if num_classes < 1:
        raise InputError(f"num_classes must be at least 1, got {num_classes}")
    values = SeededRng(seed).open_uniform((num_classes,))
    values.flags.writeable = False
    return NonceKey(values=values, session_id=session_id, rng_seed=seed)


def one_hot(labels, num_classes: int) -> Tensor:
    """Integer class labels to one-hot rows."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_one_hot(label: Tensor) -> None:
    if label.ndim != 2:
        raise InputError(f"labels must be [B, C], got {label.shape}")
    binary = np.all((label == 0.0) | (label == 1.0), axis=1)
    single = np.sum(label == 1.0, axis=1) == 1
    bad = ~(binary & single)
    if bad.any():
        raise InputError(f"label row {int(np.argmax(bad))} is not one-hot")


def delta_target(label: Tensor, y_pre: Tensor, nonce: NonceKey) -> Tensor:
    """Δy = Label - y_pre + R, with the same R on every row."""
    label = np.asarray(label, dtype=np.float64)
    y_pre = np.asarray(y_pre, dtype=np.float64)
    _check_one_hot(label)
    if label.shape != y_pre.shape or label.shape[1] != nonce.values.size:
        raise DimensionError(
            f"label {label.shape}, y_pre {y_pre.shape} and R {nonce.values.shape} disagree"
        )
    return label - y_pre + nonce.values


def fuse_output(y_pre: Tensor, y_side: Tensor, nonce: NonceKey) -> Tensor:
    """y_output = y_pre + y_side - R."""
    y_pre = np.asarray(y_pre, dtype=np.float64)
    y_side = np.asarray(y_side, dtype=np.float64)
    if y_pre.shape != y_side.shape or y_pre.shape[-1] != nonce.values.size:
        raise DimensionError(
            f"y_pre {y_pre.shape}, y_side {y_side.shape} and R {nonce.values.shape} disagree"
        )
    return y_pre + y_side - nonce.values


def sign_leak_decode(delta_y_row: Tensor) -> int:
    """Adversary guess: the unique positive entry if there is one, else the argmax.

    ``np.argmax`` breaks ties toward the lowest index.
    """
    row = np.asarray(delta_y_row, dtype=np.float64).reshape(-1)
    positive = np.flatnonzero(row > 0)
    if positive.size == 1:
        return int(positive[0])
    return int(np.argmax(row))


def measure_sign_leak(num_trials: int, num_classes: int, seed: int, masked: bool) -> float:
    """Fraction of trials in which ``sign_leak_decode`` recovers the true label.

    Each trial draws an interior probability vector y_pre, a uniform true
    class and, when ``masked``, a fresh nonce.
    """
    if num_trials < 1:
        raise InputError("num_trials must be positive")
    rng = SeededRng(seed)
    hits = 0
    for trial in range(num_trials):
        logits = rng.normal((num_classes,))
        y_pre = np.exp(logits - logits.max())
        y_pre /= y_pre.sum()
        label = one_hot([int(rng.integers(num_classes))], num_classes)
        nonce = (
            generate_nonce(num_classes, seed=int(rng.integers(2**63)), session_id=trial)
            if masked
            else NonceKey(values=np.zeros(num_classes), session_id=trial, rng_seed=0)
        )
        dy = delta_target(label, y_pre[None, :], nonce)
        hits += sign_leak_decode(dy[0]) == int(np.argmax(label[0]))
    return hits / num_trials
