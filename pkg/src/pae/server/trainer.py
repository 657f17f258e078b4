"""Side-network training state and the server-only cached epochs."""

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import ConfigError, UsageError
from ..interfaces import DefaultLogger, LoggerInterface
from ..model import SideNetworkConfig
from ..numerics import SeededRng, Tensor
from ..side_network import (
    OptimizerState,
    SideNetwork,
    init_optimizer_state,
    init_side_network,
    train_step,
)
from .cache import ActivationCache, CacheRecord

DEFAULT_TOLERANCE = 1e-5
DEFAULT_PATIENCE = 3


@dataclass
class TrainerState:
    """Everything the trainer mutates.

    ``epoch`` is the epoch in progress until it finishes, then the last
    completed one; ``loss_history`` holds one mean loss per completed epoch.
    Epoch k trains at ``learning_rate * lr_decay ** (k - 1)``.
    """

    net: SideNetwork
    opt_state: OptimizerState
    shuffle_seed: int = 0
    epoch: int = 1
    loss_history: list[float] = field(default_factory=list)
    step_count: int = 0
    epoch_losses: list[float] = field(default_factory=list)
    lr_decay: float = 1.0


@dataclass(frozen=True)
class EpochSummary:
    epoch: int
    mean_loss: float
    step_count: int


def init_trainer(
    config: SideNetworkConfig,
    shuffle_seed: int = 0,
    head_bias: Optional[Tensor] = None,
    lr_decay: float = 1.0,
) -> TrainerState:
    """Fresh side network and optimizer state.

    Raises:
        ConfigError: If ``lr_decay`` is outside (0, 1]
    """
    if not 0 < lr_decay <= 1:
        raise ConfigError(f"lr_decay must be in (0, 1], got {lr_decay}")
    net = init_side_network(config, head_bias=head_bias)
    return TrainerState(
        net=net,
        opt_state=init_optimizer_state(net),
        shuffle_seed=shuffle_seed,
        lr_decay=lr_decay,
    )


def epoch_learning_rate(state: TrainerState) -> float:
    """Step size of the epoch in progress."""
    return state.net.config.learning_rate * state.lr_decay ** len(state.loss_history)


def apply_step(state: TrainerState, activations: Sequence[Tensor], delta_y: Tensor) -> float:
    """One optimizer step; returns the loss before the update."""
    result = train_step(
        state.net, state.opt_state, activations, delta_y, epoch_learning_rate(state)
    )
    state.step_count += 1
    state.epoch_losses.append(result.loss)
    return result.loss


def apply_record(state: TrainerState, record: CacheRecord) -> float:
    return apply_step(state, record.layer_blocks(), record.target())


def finish_epoch(state: TrainerState) -> EpochSummary:
    """Close the epoch in progress and record its mean loss."""
    if not state.epoch_losses:
        raise UsageError(f"epoch {state.epoch} ran no training steps")
    mean = float(np.mean(state.epoch_losses))
    state.loss_history.append(mean)
    state.epoch = len(state.loss_history)
    state.epoch_losses = []
    return EpochSummary(epoch=state.epoch, mean_loss=mean, step_count=state.step_count)


def batch_order(shuffle_seed: int, epoch: int, num_batches: int) -> list[int]:
    """Seeded per-epoch permutation at batch granularity."""
    return [int(i) for i in SeededRng(shuffle_seed, epoch).permutation(num_batches)]


def train_epoch(state: TrainerState, records: Iterable[CacheRecord]) -> EpochSummary:
    """Train once over ``records`` in the given order and close the epoch."""
    for record in records:
        apply_record(state, record)
    return finish_epoch(state)


def run_cached_epochs(
    state: TrainerState,
    cache: ActivationCache,
    num_epochs: int,
    tol: float = DEFAULT_TOLERANCE,
    patience: int = DEFAULT_PATIENCE,
    *,
    on_epoch: Optional[Callable[[EpochSummary], None]] = None,
    logger: LoggerInterface = DefaultLogger("pae.trainer"),
) -> TrainerState:
    """Train from the sealed cache without any device involvement.

    Stops after ``num_epochs`` epochs, or earlier once the epoch-mean loss has
    improved by less than ``tol`` for ``patience`` consecutive epochs.

    Raises:
        UsageError: If the cache is not sealed
    """
    if not cache.sealed:
        raise UsageError("cached epochs need a sealed cache")
    records = cache.records
    stalled = 0
    for _ in range(num_epochs):
        if not records:
            break
        upcoming = len(state.loss_history) + 1
        order = batch_order(state.shuffle_seed, upcoming, len(records))
        previous = state.loss_history[-1] if state.loss_history else None
        summary = train_epoch(state, (records[i] for i in order))
        logger.debug(f"epoch {summary.epoch}: mean loss {summary.mean_loss:.6g}")
        if on_epoch is not None:
            on_epoch(summary)
        if previous is not None and previous - summary.mean_loss < tol:
            stalled += 1
            if stalled >= patience:
                logger.info(
                    f"converged after epoch {summary.epoch}: improvement below {tol} "
                    f"for {patience} epochs"
                )
                break
        else:
            stalled = 0
    return state
