"""Test fixtures and factories for creating test data."""

from pathlib import Path
from typing import Any

import numpy as np

from pae.backbone import BackboneModel, build_backbone
from pae.config import RunConfig, build_config
from pae.device.dataset import Dataset, synth_dataset
from pae.model import (
    ArchKind,
    BackboneConfig,
    Nonlinearity,
    OptimizerKind,
    SideNetworkConfig,
)
from pae.numerics import SeededRng
from pae.protocol.messages import MsgActivationRecord, MsgInit
from pae.server.service import PaeServer, ServerOptions


def create_backbone_config(
    num_layers: int = 2,
    hidden_size: int = 8,
    num_heads: int = 2,
    seq_len: int = 6,
    vocab_size: int = 12,
    num_classes: int = 3,
    arch_kind: ArchKind = ArchKind.AUTOREGRESSIVE,
    init_seed: int = 0,
) -> BackboneConfig:
    """Create a small BackboneConfig."""
    return BackboneConfig(
        num_layers=num_layers,
        hidden_size=hidden_size,
        num_heads=num_heads,
        seq_len=seq_len,
        vocab_size=vocab_size,
        num_classes=num_classes,
        arch_kind=arch_kind,
        init_seed=init_seed,
    )


def create_backbone(**overrides: Any) -> BackboneModel:
    return build_backbone(create_backbone_config(**overrides))


def create_side_config(
    num_layers: int = 2,
    hidden_size: int = 8,
    bottleneck: int = 4,
    num_classes: int = 3,
    learning_rate: float = 1e-2,
    optimizer: OptimizerKind = OptimizerKind.ADAM,
    init_seed: int = 0,
    nonlinearity: Nonlinearity = Nonlinearity.RELU,
) -> SideNetworkConfig:
    """Create a SideNetworkConfig matching ``create_backbone_config``."""
    return SideNetworkConfig(
        num_layers=num_layers,
        hidden_size=hidden_size,
        bottleneck=bottleneck,
        num_classes=num_classes,
        learning_rate=learning_rate,
        optimizer=optimizer,
        init_seed=init_seed,
        nonlinearity=nonlinearity,
    )


def create_dataset(
    n: int = 12,
    seq_len: int = 6,
    vocab_size: int = 12,
    num_classes: int = 3,
    seed: int = 0,
    arch_kind: ArchKind = ArchKind.AUTOREGRESSIVE,
) -> Dataset:
    return synth_dataset(seed, n, seq_len, vocab_size, num_classes, arch_kind=arch_kind)


def create_run_config(**overrides: Any) -> RunConfig:
    """A RunConfig small enough for a loopback session in well under a second."""
    values: dict[str, Any] = {
        "num_layers": 2,
        "hidden_size": 8,
        "num_heads": 2,
        "seq_len": 6,
        "vocab_size": 12,
        "num_classes": 2,
        "bottleneck": 4,
        "learning_rate": 1e-2,
        "dataset_size": 24,
        "batch_size": 4,
        "epochs": 3,
        "retry_base_delay": 0.0,
    }
    values.update(overrides)
    return build_config(values)


def create_init(
    session_id: int = 1,
    num_layers: int = 2,
    hidden_size: int = 8,
    num_classes: int = 3,
    bottleneck: int = 4,
    dataset_size: int = 8,
    batch_size: int = 4,
    optimizer: OptimizerKind = OptimizerKind.ADAM,
) -> MsgInit:
    return MsgInit(
        session_id=session_id,
        num_layers=num_layers,
        hidden_size=hidden_size,
        num_classes=num_classes,
        arch_kind=ArchKind.AUTOREGRESSIVE,
        bottleneck=bottleneck,
        learning_rate=1e-2,
        optimizer=optimizer,
        adam_beta1=0.9,
        adam_beta2=0.999,
        adam_eps=1e-8,
        side_seed=0,
        nonlinearity=Nonlinearity.RELU,
        dataset_size=dataset_size,
        batch_size=batch_size,
    )


def create_record(
    init: MsgInit,
    batch_index: int = 0,
    sample_ids: tuple[int, ...] | None = None,
    seed: int = 0,
) -> MsgActivationRecord:
    """Random float32 pivot record shaped for ``init``."""
    if sample_ids is None:
        start = batch_index * init.batch_size
        sample_ids = tuple(range(start, start + init.batch_size))
    rng = SeededRng(seed, batch_index)
    batch = len(sample_ids)
    return MsgActivationRecord(
        session_id=init.session_id,
        epoch=1,
        batch_index=batch_index,
        sample_ids=sample_ids,
        activations=rng.normal((init.num_layers, batch, init.hidden_size)).astype(np.float32),
        delta_y=rng.uniform(-1.0, 1.0, (batch, init.num_classes)).astype(np.float32),
    )


def create_server(cache_dir: Path, **options: Any) -> PaeServer:
    """Server with inline training unless told otherwise."""
    options.setdefault("threaded_training", False)
    return PaeServer(ServerOptions(cache_dir=cache_dir, **options))
