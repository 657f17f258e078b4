"""Server side: activation cache, side-network trainer and session service."""

from .cache import ActivationCache, CacheRecord
from .service import (
    InlineTrainQueue,
    PaeServer,
    ServerOptions,
    ThreadedTrainQueue,
    deploy_side_network,
)
from .trainer import TrainerState, init_trainer, run_cached_epochs

__all__ = [
    "ActivationCache",
    "CacheRecord",
    "InlineTrainQueue",
    "PaeServer",
    "ServerOptions",
    "ThreadedTrainQueue",
    "TrainerState",
    "deploy_side_network",
    "init_trainer",
    "run_cached_epochs",
]
