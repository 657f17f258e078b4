"""Device pipeline: frozen forward passes, masking and epoch-1 transmission.

A compute thread runs the backbone batch by batch and feeds a bounded,
order-preserving queue; the caller's thread transmits each record and waits
for its acknowledgement. After MsgEpochDone the device does no further
forward passes and only waits for the deployed side network.
"""

import queue
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from ..backbone import BackboneModel, forward, pivot_activations, pivot_indices
from ..errors import ProtocolError, RemoteError, TransmissionAborted, UsageError
from ..interfaces import DefaultLogger, LoggerInterface, TransportInterface
from ..model import ActivationMode, SideNetworkConfig
from ..privacy import NonceKey, delta_target
from ..protocol.messages import (
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
from ..protocol.transport import FrameConnection
from ..side_network import SideNetwork, deserialize_side_network
from .dataset import Batch, Dataset

DEFAULT_QUEUE_DEPTH = 4
RecordMessage = Union[MsgActivationRecord, MsgFullActivationRecord]


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded exponential backoff: ``base_delay * factor**(n-1)`` before retry n."""

    attempts: int = 5
    base_delay: float = 0.05
    factor: float = 2.0

    def delay(self, failure: int) -> float:
        return self.base_delay * self.factor ** (failure - 1)


@dataclass
class TransmitStats:
    """Payload accounting over acknowledged records.

    Attributes:
        records: Acknowledged records
        activation_bytes: Activation float bytes in those records
        delta_bytes: Δy float bytes in those records
        record_frame_bytes: Whole frames of those records, envelope included
        retries: Transport failures that were retried
    """

    records: int = 0
    activation_bytes: int = 0
    delta_bytes: int = 0
    record_frame_bytes: int = 0
    retries: int = 0


@dataclass
class SessionResult:
    side_network: SideNetwork
    statuses: list[MsgTrainStatus]
    stats: TransmitStats
    forward_count: int
    bytes_sent: Counter = field(default_factory=Counter)
    bytes_received: Counter = field(default_factory=Counter)


class _Done:
    pass


@dataclass
class _Failed:
    error: BaseException


class _RetriesExhausted(Exception):
    def __init__(self, cause: Exception):
        super().__init__(str(cause))
        self.cause = cause


class DevicePipeline:
    """Everything that runs on the device for one fine-tuning session.

    Args:
        backbone: Frozen backbone
        nonce: Session secret R; its session_id names the session
        connect: Opens a fresh transport to the server
        activation_mode: Transmit pivot activations or full hidden states
        queue_depth: Records buffered between compute and transmission
        retry: Backoff policy for transport failures
        logger: Logger
        sleep: Injected for tests
    """

    def __init__(
        self,
        backbone: BackboneModel,
        nonce: NonceKey,
        connect: Callable[[], TransportInterface],
        *,
        activation_mode: ActivationMode = ActivationMode.PIVOT,
        queue_depth: int = DEFAULT_QUEUE_DEPTH,
        retry: RetryPolicy = RetryPolicy(),
        logger: LoggerInterface = DefaultLogger("pae.device"),
        sleep: Callable[[float], None] = time.sleep,
    ):
        if queue_depth < 1:
            raise UsageError(f"queue_depth must be at least 1, got {queue_depth}")
        if nonce.values.size != backbone.config.num_classes:
            raise UsageError("nonce and backbone disagree on the number of classes")
        self.backbone = backbone
        self.nonce = nonce
        self.connect = connect
        self.activation_mode = activation_mode
        self.queue_depth = queue_depth
        self.retry = retry
        self.logger = logger
        self.sleep = sleep
        self.stats = TransmitStats()
        self.bytes_sent: Counter[MsgType] = Counter()
        self.bytes_received: Counter[MsgType] = Counter()
        self._forward_count = 0
        self._count_lock = threading.Lock()
        self._conn: Optional[FrameConnection] = None

    @property
    def session_id(self) -> int:
        return self.nonce.session_id

    @property
    def forward_count(self) -> int:
        """Samples passed through the backbone so far."""
        with self._count_lock:
            return self._forward_count

    def build_init(
        self, side_config: SideNetworkConfig, dataset_size: int, batch_size: int
    ) -> MsgInit:
        bc = self.backbone.config
        if side_config.num_layers != bc.num_layers or side_config.hidden_size != bc.hidden_size:
            raise UsageError("side network must match the backbone's layer count and width")
        if side_config.num_classes != bc.num_classes:
            raise UsageError("side network must match the backbone's class count")
        return MsgInit(
            session_id=self.session_id,
            num_layers=bc.num_layers,
            hidden_size=bc.hidden_size,
            num_classes=bc.num_classes,
            arch_kind=bc.arch_kind,
            bottleneck=side_config.bottleneck,
            learning_rate=side_config.learning_rate,
            optimizer=side_config.optimizer,
            adam_beta1=side_config.adam_beta1,
            adam_beta2=side_config.adam_beta2,
            adam_eps=side_config.adam_eps,
            side_seed=side_config.init_seed,
            nonlinearity=side_config.nonlinearity,
            dataset_size=dataset_size,
            batch_size=batch_size,
        )

    def make_record(self, batch_index: int, batch: Batch) -> RecordMessage:
        """Forward one batch and package what may leave the device."""
        trace = forward(self.backbone, batch.tokens, batch.pad_mask)
        with self._count_lock:
            self._forward_count += len(batch.sample_ids)
        delta_y = delta_target(batch.labels, trace.y_pre, self.nonce).astype(np.float32)
        if self.activation_mode is ActivationMode.FULL:
            pivots = pivot_indices(self.backbone.config.arch_kind, batch.pad_mask)
            return MsgFullActivationRecord(
                session_id=self.session_id,
                epoch=1,
                batch_index=batch_index,
                sample_ids=batch.sample_ids,
                pivot_index=tuple(int(p) for p in pivots),
                hidden_states=np.stack(trace.hidden_states).astype(np.float32),
                delta_y=delta_y,
            )
        return MsgActivationRecord(
            session_id=self.session_id,
            epoch=1,
            batch_index=batch_index,
            sample_ids=batch.sample_ids,
            activations=pivot_activations(self.backbone, trace, batch.pad_mask).astype(
                np.float32
            ),
            delta_y=delta_y,
        )

    def _drop(self) -> None:
        if self._conn is not None:
            try:
                self._conn.close()
            except OSError:
                pass
            self._conn = None

    def _expect_ack(self, conn: FrameConnection, acked: MsgType, batch_index: int) -> MsgAck:
        reply = conn.recv()
        if isinstance(reply, MsgError):
            raise RemoteError(reply.code, reply.message)
        if (
            not isinstance(reply, MsgAck)
            or reply.acked_type != acked
            or reply.batch_index != batch_index
        ):
            raise ProtocolError(f"expected ack of {acked.name} {batch_index}, got {reply!r}")
        return reply

    def _connection(self, init: MsgInit) -> FrameConnection:
        if self._conn is None:
            conn = FrameConnection(
                self.connect(), bytes_sent=self.bytes_sent, bytes_received=self.bytes_received
            )
            self._conn = conn
            conn.send(init)
            self._expect_ack(conn, MsgType.INIT, 0)
        return self._conn

    def _backoff(self, failures: int, error: Exception) -> None:
        self._drop()
        if failures >= self.retry.attempts:
            raise _RetriesExhausted(error)
        self.stats.retries += 1
        delay = self.retry.delay(failures)
        self.logger.warning(f"transport failure ({error}); retry {failures} in {delay:.3f}s")
        self.sleep(delay)

    def _request(self, msg: Message, init: MsgInit, batch_index: int) -> int:
        """Send ``msg`` until acknowledged, reconnecting as needed; returns the frame size."""
        failures = 0
        while True:
            try:
                conn = self._connection(init)
                size = conn.send(msg)
                self._expect_ack(conn, msg.msg_type, batch_index)
                return size
            except (ConnectionError, ProtocolError) as e:
                failures += 1
                self._backoff(failures, e)

    def _produce(
        self,
        dataset: Dataset,
        batch_size: int,
        out: "queue.Queue[object]",
        cancel: threading.Event,
    ) -> None:
        def put(item: object) -> bool:
            while not cancel.is_set():
                try:
                    out.put(item, timeout=0.05)
                    return True
                except queue.Full:
                    continue
            return False

        try:
            for index, batch in enumerate(dataset.batches(batch_size)):
                if cancel.is_set() or not put(self.make_record(index, batch)):
                    return
            put(_Done())
        except Exception as e:
            put(_Failed(e))

    def run_epoch1(
        self, dataset: Dataset, batch_size: int, side_config: SideNetworkConfig
    ) -> MsgInit:
        """Forward, mask and transmit every batch once, then send MsgEpochDone.

        Compute of batch k+1 overlaps transmission of batch k up to
        ``queue_depth`` records ahead.

        Raises:
            TransmissionAborted: When a transport failure outlasts the retry budget
            RemoteError: When the server rejects a message
        """
        init = self.build_init(side_config, len(dataset), batch_size)
        total = dataset.num_batches(batch_size)
        pending: "queue.Queue[object]" = queue.Queue(maxsize=self.queue_depth)
        cancel = threading.Event()
        producer = threading.Thread(
            target=self._produce,
            args=(dataset, batch_size, pending, cancel),
            name="pae-compute",
            daemon=True,
        )
        producer.start()
        acked = 0
        try:
            while True:
                item = pending.get()
                if isinstance(item, _Done):
                    break
                if isinstance(item, _Failed):
                    raise item.error
                record: RecordMessage = item  # type: ignore[assignment]
                size = self._request(record, init, record.batch_index)
                acked += 1
                self._account(record, size)
            self._request(MsgEpochDone(self.session_id, len(dataset)), init, 0)
        except _RetriesExhausted as e:
            raise TransmissionAborted(acked, total, e.cause) from e.cause
        finally:
            cancel.set()
            producer.join()
        self.logger.info(f"epoch 1 sent: {acked} records, {self.forward_count} samples")
        return init

    def _account(self, record: RecordMessage, frame_size: int) -> None:
        if isinstance(record, MsgFullActivationRecord):
            floats = np.asarray(record.hidden_states).size
        else:
            floats = np.asarray(record.activations).size
        self.stats.records += 1
        self.stats.activation_bytes += 4 * floats
        self.stats.delta_bytes += 4 * np.asarray(record.delta_y).size
        self.stats.record_frame_bytes += frame_size

    def await_deployment(
        self,
        init: MsgInit,
        sample_count: int,
        on_status: Optional[Callable[[MsgTrainStatus], None]] = None,
    ) -> tuple[SideNetwork, list[MsgTrainStatus]]:
        """Idle until MsgDeploySideNet arrives, collecting MsgTrainStatus on the way.

        A broken connection is retried by reconnecting and re-sending
        MsgEpochDone; the server answers a finished session with the stored
        side network.
        """
        statuses: list[MsgTrainStatus] = []
        failures = 0
        while True:
            try:
                if self._conn is None:
                    self._request(MsgEpochDone(self.session_id, sample_count), init, 0)
                assert self._conn is not None
                msg = self._conn.recv()
            except (ConnectionError, ProtocolError) as e:
                failures += 1
                try:
                    self._backoff(failures, e)
                except _RetriesExhausted as exhausted:
                    raise TransmissionAborted(
                        self.stats.records, self.stats.records, exhausted.cause
                    ) from exhausted.cause
                continue
            if isinstance(msg, MsgTrainStatus):
                statuses.append(msg)
                self.logger.info(
                    f"server epoch {msg.epoch}: loss {msg.mean_loss:.6g}, {msg.step_count} steps"
                )
                if on_status is not None:
                    on_status(msg)
            elif isinstance(msg, MsgDeploySideNet):
                self._drop()
                return deserialize_side_network(msg.side_network), statuses
            elif isinstance(msg, MsgError):
                self._drop()
                raise RemoteError(msg.code, msg.message)
            elif isinstance(msg, MsgAck) and msg.acked_type is MsgType.EPOCH_DONE:
                continue
            else:
                self._drop()
                raise ProtocolError(f"unexpected {msg.msg_type.name} while awaiting deployment")

    def run_session(
        self,
        dataset: Dataset,
        batch_size: int,
        side_config: SideNetworkConfig,
        on_status: Optional[Callable[[MsgTrainStatus], None]] = None,
    ) -> SessionResult:
        """Epoch 1 followed by the wait for deployment."""
        init = self.run_epoch1(dataset, batch_size, side_config)
        net, statuses = self.await_deployment(init, len(dataset), on_status)
        return SessionResult(
            side_network=net,
            statuses=statuses,
            stats=self.stats,
            forward_count=self.forward_count,
            bytes_sent=Counter(self.bytes_sent),
            bytes_received=Counter(self.bytes_received),
        )
