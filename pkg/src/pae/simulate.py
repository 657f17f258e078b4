"""One full session, device and server in the same process over loopback."""

import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .accounting import RunMetrics
from .backbone import BackboneModel, build_backbone, forward
from .config import RunConfig
from .device.dataset import Dataset, dataset_from_config
from .device.pipeline import DevicePipeline, RetryPolicy, SessionResult
from .device.session import classify, predict
from .interfaces import DefaultLogger, LoggerInterface, NullStatus, StatusInterface
from .privacy import NonceKey, generate_nonce
from .protocol.transport import FrameConnection, LoopbackTransport, loopback_pair
from .server.service import PaeServer, ServerOptions
from .side_network import SideNetwork


class LoopbackConnector:
    """Connection factory: every call opens a loopback pair served by ``server``."""

    def __init__(self, server: PaeServer, timeout: Optional[float] = None):
        self.server = server
        self.timeout = timeout
        self.threads: list[threading.Thread] = []

    def __call__(self) -> LoopbackTransport:
        device_end, server_end = loopback_pair(self.timeout)
        thread = threading.Thread(
            target=self.server.serve_connection,
            args=(FrameConnection(server_end),),
            name=f"pae-loopback-{len(self.threads)}",
            daemon=True,
        )
        thread.start()
        self.threads.append(thread)
        return device_end

    def join(self, timeout: Optional[float] = None) -> None:
        for thread in self.threads:
            thread.join(timeout)


@dataclass
class SimulationResult:
    metrics: RunMetrics
    session: SessionResult
    server: PaeServer
    pipeline: DevicePipeline
    dataset: Dataset
    backbone: BackboneModel
    nonce: NonceKey


def evaluate(
    backbone: BackboneModel,
    side_network: SideNetwork,
    nonce: NonceKey,
    dataset: Dataset,
    batch_size: int,
) -> tuple[float, float]:
    """Train-set accuracy of the frozen backbone alone and of the fused output."""
    if not len(dataset):
        return 0.0, 0.0
    frozen = fused = 0
    for batch in dataset.batches(batch_size):
        labels = np.argmax(batch.labels, axis=1)
        y_pre = forward(backbone, batch.tokens, batch.pad_mask).y_pre
        y_out = predict(backbone, side_network, nonce, batch.tokens, batch.pad_mask)
        frozen += int(np.sum(classify(y_pre) == labels))
        fused += int(np.sum(classify(y_out) == labels))
    return frozen / len(dataset), fused / len(dataset)


def simulate(
    config: RunConfig,
    *,
    cache_dir: Optional[Path] = None,
    dataset: Optional[Dataset] = None,
    evaluate_accuracy: bool = True,
    threaded_training: bool = True,
    logger: LoggerInterface = DefaultLogger("pae.simulate"),
    status: StatusInterface = NullStatus(),
) -> SimulationResult:
    """Run epoch 1, the server-only epochs and deployment; collect RunMetrics.

    Args:
        config: Run configuration
        cache_dir: Server cache directory; a temporary one when not given
        dataset: Use this dataset instead of the one ``config`` describes
        evaluate_accuracy: Score frozen and fused predictions on the training set
        threaded_training: Use the server's trainer thread
        logger: Logger
        status: Status record sink
    """
    backbone = build_backbone(config.backbone_config())
    side_config = config.side_config()
    if dataset is None:
        dataset = dataset_from_config(config)
    nonce = generate_nonce(config.num_classes, config.nonce_seed, config.session_id)

    with tempfile.TemporaryDirectory(prefix="pae-sim-") as scratch:
        options = ServerOptions(
            cache_dir=cache_dir if cache_dir is not None else Path(scratch),
            epochs=config.epochs,
            tol=config.tol,
            patience=config.patience,
            shuffle_seed=config.shuffle_seed,
            lr_decay=config.lr_decay,
            multi_session=config.multi_session,
            threaded_training=threaded_training,
        )
        server = PaeServer(options, logger=DefaultLogger("pae.server"), status=status)
        connector = LoopbackConnector(server)
        pipeline = DevicePipeline(
            backbone,
            nonce,
            connector,
            activation_mode=config.activation_mode,
            queue_depth=config.queue_depth,
            retry=RetryPolicy(config.retry_attempts, config.retry_base_delay, config.retry_factor),
            logger=DefaultLogger("pae.device"),
        )

        started = time.perf_counter()
        init = pipeline.run_epoch1(dataset, config.batch_size, side_config)
        sent_epoch1 = time.perf_counter()
        net, statuses = pipeline.await_deployment(init, len(dataset))
        finished = time.perf_counter()
        connector.join()

    session = SessionResult(
        side_network=net,
        statuses=statuses,
        stats=pipeline.stats,
        forward_count=pipeline.forward_count,
        bytes_sent=pipeline.bytes_sent.copy(),
        bytes_received=pipeline.bytes_received.copy(),
    )
    frozen_acc, fused_acc = (
        evaluate(backbone, net, nonce, dataset, config.batch_size)
        if evaluate_accuracy
        else (0.0, 0.0)
    )
    stats = pipeline.stats
    total_sent = sum(session.bytes_sent.values())
    metrics = RunMetrics(
        mode=config.activation_mode.value,
        seq_len=config.seq_len,
        batch_size=config.batch_size,
        samples=len(dataset),
        records=stats.records,
        bytes_sent=total_sent,
        bytes_received=sum(session.bytes_received.values()),
        activation_bytes=stats.activation_bytes,
        delta_bytes=stats.delta_bytes,
        overhead_bytes=total_sent - stats.activation_bytes - stats.delta_bytes,
        forward_count=pipeline.forward_count,
        step_count=statuses[-1].step_count if statuses else 0,
        epoch_losses=[s.mean_loss for s in statuses],
        phase_seconds={
            "epoch1": sent_epoch1 - started,
            "server_only": finished - sent_epoch1,
            "total": finished - started,
        },
        frozen_accuracy=frozen_acc,
        fused_accuracy=fused_acc,
        retries=stats.retries,
    )
    logger.info(
        f"simulated {len(dataset)} samples: {metrics.bytes_sent} bytes sent, "
        f"fused accuracy {fused_acc:.3f}"
    )
    return SimulationResult(metrics, session, server, pipeline, dataset, backbone, nonce)
