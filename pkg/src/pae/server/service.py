"""Server state machine and transport loop.

A session moves through three phases: epoch 1 (records arrive, each is cached
and trained on once), cached epochs (sealed cache, no device traffic) and
deployment. A receiver role decodes frames and appends to the cache; a single
trainer role owns the side network and consumes work from a bounded queue.
"""

import queue
import socket
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np

from ..errors import (
    CacheError,
    ConfigError,
    CountMismatchError,
    DimensionError,
    DuplicateSampleError,
    ErrorCode,
    ProtocolError,
    RemoteError,
    SealedCacheError,
    UsageError,
)
from ..interfaces import DefaultLogger, LoggerInterface, NullStatus, StatusInterface
from ..model import SideNetworkConfig
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
from ..protocol.transport import FrameConnection, SocketTransport
from ..side_network import deserialize_side_network, serialize_side_network
from .cache import ActivationCache, CacheRecord
from .trainer import (
    DEFAULT_PATIENCE,
    DEFAULT_TOLERANCE,
    EpochSummary,
    TrainerState,
    apply_record,
    finish_epoch,
    init_trainer,
    run_cached_epochs,
)

Reply = Callable[[Message], object]


@dataclass(frozen=True)
class ServerOptions:
    """Server behaviour.

    Attributes:
        cache_dir: Directory for cache logs and deployed side networks
        epochs: Epoch budget E, epoch 1 included
        tol: Minimum epoch-mean loss improvement that counts as progress
        patience: Stalled epochs tolerated before stopping early
        shuffle_seed: Seed of the per-epoch batch permutation
        lr_decay: Per-epoch learning-rate factor, epoch 1 trains at the Init rate
        multi_session: Allow more than one live session
        train_queue_depth: Bound of the receiver-to-trainer queue
        threaded_training: Run training steps on a dedicated trainer thread
        fsync: fsync the cache log after every append
    """

    cache_dir: Path
    epochs: int = 20
    tol: float = DEFAULT_TOLERANCE
    patience: int = DEFAULT_PATIENCE
    shuffle_seed: int = 0
    lr_decay: float = 1.0
    multi_session: bool = False
    train_queue_depth: int = 16
    threaded_training: bool = True
    fsync: bool = False


class TrainQueueInterface(Protocol):
    """Ordered hand-off from the receiver to the trainer."""

    def submit(self, task: Callable[[], None]) -> None:
        """Queue a task; blocks while the queue is full."""
        ...

    def join(self) -> None:
        """Wait until every queued task ran; re-raise the first task failure."""
        ...

    def close(self) -> None:
        """Stop accepting work and release the worker."""
        ...


class InlineTrainQueue:
    """Runs each task on submit."""

    def submit(self, task: Callable[[], None]) -> None:
        task()

    def join(self) -> None:
        pass

    def close(self) -> None:
        pass


class ThreadedTrainQueue:
    """Bounded FIFO drained by one trainer thread."""

    def __init__(self, maxsize: int = 16):
        self._queue: queue.Queue[Optional[Callable[[], None]]] = queue.Queue(maxsize)
        self._error: Optional[BaseException] = None
        self._thread = threading.Thread(target=self._run, name="pae-trainer", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while True:
            task = self._queue.get()
            try:
                if task is None:
                    return
                if self._error is None:
                    task()
            except Exception as e:
                self._error = e
            finally:
                self._queue.task_done()

    def submit(self, task: Callable[[], None]) -> None:
        if self._error is not None:
            raise self._error
        self._queue.put(task)

    def join(self) -> None:
        self._queue.join()
        if self._error is not None:
            raise self._error

    def close(self) -> None:
        if self._thread.is_alive():
            self._queue.put(None)
            self._thread.join()


@dataclass
class Session:
    init: MsgInit
    cache: ActivationCache
    trainer: TrainerState
    train_queue: TrainQueueInterface
    statuses: list[MsgTrainStatus] = field(default_factory=list)
    deployed: Optional[bytes] = None
    failed: Optional[str] = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def finished(self) -> bool:
        return self.deployed is not None

    @property
    def live(self) -> bool:
        return self.deployed is None and self.failed is None


def error_code(exc: Exception) -> ErrorCode:
    """Map a handler failure onto the code sent in MsgError."""
    if isinstance(exc, RemoteError):
        return exc.code
    if isinstance(exc, SealedCacheError):
        return ErrorCode.CACHE_SEALED
    if isinstance(exc, DuplicateSampleError):
        return ErrorCode.DUPLICATE_SAMPLE
    if isinstance(exc, CountMismatchError):
        return ErrorCode.COUNT_MISMATCH
    if isinstance(exc, DimensionError):
        return ErrorCode.DIMENSION_MISMATCH
    if isinstance(exc, ConfigError):
        return ErrorCode.CONFIG_CONFLICT
    if isinstance(exc, ProtocolError):
        return ErrorCode.PROTOCOL
    return ErrorCode.BAD_STATE


def deploy_side_network(state: TrainerState) -> MsgDeploySideNet:
    """Package the trained side network; no other server message carries parameters."""
    return MsgDeploySideNet(serialize_side_network(state.net))


class PaeServer:
    """Receives epoch-1 records, trains, caches, finishes from cache and deploys.

    The server lock guards the session table only. Each session has its own
    lock, held while a record is cached and for the whole of sealing,
    cached training and deployment, so a long training run blocks only
    traffic for that session.
    """

    def __init__(
        self,
        options: ServerOptions,
        *,
        logger: LoggerInterface = DefaultLogger("pae.server"),
        status: StatusInterface = NullStatus(),
        train_queue_factory: Optional[Callable[[], TrainQueueInterface]] = None,
    ):
        if options.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {options.epochs}")
        if not 0 < options.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {options.lr_decay}")
        self.options = options
        self.logger = logger
        self.status = status
        if train_queue_factory is None:
            if options.threaded_training:
                depth = options.train_queue_depth
                train_queue_factory = lambda: ThreadedTrainQueue(depth)  # noqa: E731
            else:
                train_queue_factory = InlineTrainQueue
        self._train_queue_factory = train_queue_factory
        self.sessions: dict[int, Session] = {}
        self._lock = threading.RLock()

    def cache_path(self, session_id: int) -> Path:
        return self.options.cache_dir / f"session-{session_id:016x}.paec"

    def side_network_path(self, session_id: int) -> Path:
        return self.options.cache_dir / f"session-{session_id:016x}.paes"

    def handle(self, msg: Message, reply: Reply) -> None:
        """Process one inbound message; failures are answered with MsgError."""
        try:
            if isinstance(msg, MsgInit):
                out: Message = self.handle_init(msg)
            elif isinstance(msg, MsgActivationRecord):
                out = self.handle_activation_record(msg)
            elif isinstance(msg, MsgFullActivationRecord):
                out = self.handle_full_activation_record(msg)
            elif isinstance(msg, MsgEpochDone):
                self.handle_epoch_done(msg, reply)
                return
            else:
                raise RemoteError(
                    ErrorCode.BAD_STATE, f"unexpected {msg.msg_type.name} from device"
                )
        except (ValueError, UsageError, CacheError, RemoteError) as e:
            code = error_code(e)
            message = e.message if isinstance(e, RemoteError) else str(e)
            self.logger.warning(f"rejected {msg.msg_type.name}: [{code.name}] {message}")
            out = MsgError(code, message)
        reply(out)

    def _session(self, session_id: int) -> Session:
        with self._lock:
            session = self.sessions.get(session_id)
        if session is None:
            raise RemoteError(ErrorCode.NO_SESSION, f"no session {session_id}")
        return session

    def handle_init(self, msg: MsgInit) -> MsgAck:
        """Create a session, or resume one whose cache survived a restart.

        Re-sending an identical MsgInit is acknowledged without side effects.
        A failed session is replaced by a fresh one.

        Raises:
            ConfigError: If the config is invalid or conflicts with the live session
            RemoteError: If another session is live and multi-session is off
        """
        with self._lock:
            existing = self.sessions.get(msg.session_id)
            if existing is not None and existing.failed is None:
                if existing.init != msg:
                    raise ConfigError(
                        f"session {msg.session_id} already exists with another config"
                    )
                self.logger.info(f"session {msg.session_id}: idempotent re-init")
                return MsgAck(MsgType.INIT, 0)

            if not self.options.multi_session:
                live = [sid for sid, s in self.sessions.items() if s.live]
                if live:
                    raise RemoteError(ErrorCode.BAD_STATE, f"session {live[0]} is still live")
                self.sessions.clear()

            config = msg.side_config()
            config.validate()
            if msg.batch_size < 1:
                raise ConfigError(f"batch_size must be positive, got {msg.batch_size}")

            session = None
            if existing is None and self.cache_path(msg.session_id).exists():
                session = self._resume(msg, config)
            if session is None:
                session = self._fresh(msg, config)
            self.sessions[msg.session_id] = session
        self.status.emit(
            "session",
            session=msg.session_id,
            layers=msg.num_layers,
            hidden=msg.hidden_size,
            classes=msg.num_classes,
            bottleneck=msg.bottleneck,
            samples=msg.dataset_size,
            resumed=len(session.cache),
        )
        return MsgAck(MsgType.INIT, 0)

    def _new_trainer(self, config: SideNetworkConfig) -> TrainerState:
        return init_trainer(
            config, shuffle_seed=self.options.shuffle_seed, lr_decay=self.options.lr_decay
        )

    def _fresh(self, msg: MsgInit, config: SideNetworkConfig) -> Session:
        cache = ActivationCache.create(
            self.cache_path(msg.session_id),
            msg.session_id,
            msg.num_layers,
            msg.hidden_size,
            msg.num_classes,
            msg.dataset_size,
            fsync=self.options.fsync,
        )
        return Session(
            init=msg,
            cache=cache,
            trainer=self._new_trainer(config),
            train_queue=self._train_queue_factory(),
        )

    def _resume(self, msg: MsgInit, config: SideNetworkConfig) -> Optional[Session]:
        """Rebuild a session from the cache log left by an earlier server process.

        The trainer replays the cached records in log order, which is the
        order they were first trained in. Returns None when the log is
        unreadable or belongs to a different layout.
        """
        sid = msg.session_id
        path = self.cache_path(sid)
        try:
            cache = ActivationCache.recover(path, fsync=self.options.fsync, logger=self.logger)
        except CacheError as e:
            self.logger.warning(f"session {sid}: cache not recoverable, starting over: {e}")
            return None
        layout = (cache.num_layers, cache.hidden_size, cache.num_classes, cache.dataset_size)
        wanted = (msg.num_layers, msg.hidden_size, msg.num_classes, msg.dataset_size)
        if cache.session_id != sid or layout != wanted:
            cache.close()
            self.logger.warning(f"session {sid}: cache layout {layout} differs, starting over")
            return None

        trainer = self._new_trainer(config)
        deployed = None
        side_path = self.side_network_path(sid)
        if cache.sealed and side_path.exists():
            blob = side_path.read_bytes()
            try:
                if deserialize_side_network(blob).config == config:
                    deployed = blob
            except ConfigError as e:
                self.logger.warning(f"session {sid}: ignoring unreadable side network: {e}")
            if deployed is None:
                cache.close()
                self.logger.warning(f"session {sid}: deployed network differs, starting over")
                return None
        if deployed is None:
            for record in cache.records:
                apply_record(trainer, record)
            train_queue = self._train_queue_factory()
        else:
            cache.close()
            train_queue = InlineTrainQueue()
        self.logger.info(
            f"session {sid}: resumed {len(cache)} cached records"
            + (" (deployed)" if deployed is not None else "")
        )
        return Session(
            init=msg, cache=cache, trainer=trainer, train_queue=train_queue, deployed=deployed
        )

    def handle_activation_record(self, msg: MsgActivationRecord) -> MsgAck:
        """Cache one pivot record and queue its training step.

        A batch that is already cached with the same sample ids is a replay and
        is acknowledged again without a second step.
        """
        session = self._session(msg.session_id)
        self._accept(
            session,
            msg.epoch,
            msg.batch_index,
            msg.sample_ids,
            np.asarray(msg.activations),
            np.asarray(msg.delta_y),
        )
        return MsgAck(MsgType.ACTIVATION_RECORD, msg.batch_index)

    def handle_full_activation_record(self, msg: MsgFullActivationRecord) -> MsgAck:
        """Select pivots from full hidden states, then treat as a pivot record."""
        session = self._session(msg.session_id)
        hidden = np.asarray(msg.hidden_states)
        layers = session.init.num_layers
        batch = len(msg.sample_ids)
        if hidden.ndim != 4 or hidden.shape[0] != layers or hidden.shape[1] != batch:
            raise DimensionError(
                f"expected [{layers}, {batch}, L_seq, H] hidden states, got {hidden.shape}"
            )
        pivots = np.asarray(msg.pivot_index, dtype=np.int64)
        if pivots.size and pivots.max() >= hidden.shape[2]:
            raise DimensionError(f"pivot index beyond sequence length {hidden.shape[2]}")
        acts = np.ascontiguousarray(hidden[:, np.arange(batch), pivots, :])
        self._accept(
            session,
            msg.epoch,
            msg.batch_index,
            msg.sample_ids,
            acts,
            np.asarray(msg.delta_y),
        )
        return MsgAck(MsgType.FULL_ACTIVATION_RECORD, msg.batch_index)

    def _accept(
        self,
        session: Session,
        epoch: int,
        batch_index: int,
        sample_ids: tuple[int, ...],
        activations: np.ndarray,
        delta_y: np.ndarray,
    ) -> None:
        init = session.init
        session_id = init.session_id
        with session.lock:
            if session.failed is not None:
                raise RemoteError(
                    ErrorCode.BAD_STATE, f"session {session_id} failed: {session.failed}"
                )
            if session.cache.sealed:
                raise SealedCacheError(f"session {session_id} is past epoch 1")
            if epoch != 1:
                raise RemoteError(
                    ErrorCode.BAD_STATE, f"records must belong to epoch 1, got {epoch}"
                )
            batch = len(sample_ids)
            if not 1 <= batch <= init.batch_size:
                raise DimensionError(f"batch of {batch} samples outside [1, {init.batch_size}]")
            if activations.ndim != 3 or activations.shape[0] != init.num_layers:
                raise DimensionError(
                    f"expected {init.num_layers} activation blocks, got shape {activations.shape}"
                )
            if activations.shape[1:] != (batch, init.hidden_size):
                raise DimensionError(
                    f"activation blocks must be [{batch}, {init.hidden_size}], "
                    f"got {activations.shape[1:]}"
                )
            if delta_y.shape != (batch, init.num_classes):
                raise DimensionError(
                    f"delta_y must be [{batch}, {init.num_classes}], got {delta_y.shape}"
                )

            cached = session.cache.get(batch_index)
            if cached is not None and cached.sample_ids == tuple(sample_ids):
                self.logger.info(f"session {session_id}: batch {batch_index} replayed, re-acking")
                return
            record = session.cache.append(batch_index, sample_ids, activations, delta_y)
            session.train_queue.submit(lambda: self._train(session, record))

    def _train(self, session: Session, record: CacheRecord) -> None:
        loss = apply_record(session.trainer, record)
        self.logger.debug(
            f"session {session.init.session_id}: step {session.trainer.step_count} "
            f"batch {record.batch_index} loss {loss:.6g}"
        )

    def _fail(self, session: Session, error: Exception) -> None:
        session.failed = str(error) or type(error).__name__
        session.train_queue.close()
        session.cache.close()
        self.logger.warning(f"session {session.init.session_id} failed: {session.failed}")
        self.status.emit("failed", session=session.init.session_id, reason=session.failed)

    def handle_epoch_done(self, msg: MsgEpochDone, reply: Reply) -> None:
        """Seal the cache, finish epoch 1, run the cached epochs and deploy.

        Replies: one MsgAck, one MsgTrainStatus per completed epoch, then
        MsgDeploySideNet. A lost connection does not interrupt training; the
        device fetches the result by re-sending MsgEpochDone. A seal or
        training failure ends the session, which then stops counting as live.
        """
        session = self._session(msg.session_id)
        with session.lock:
            if session.deployed is not None:
                reply(MsgAck(MsgType.EPOCH_DONE, 0))
                reply(MsgDeploySideNet(session.deployed))
                return
            if session.failed is not None:
                raise RemoteError(
                    ErrorCode.BAD_STATE, f"session {msg.session_id} failed: {session.failed}"
                )
            try:
                self._seal(session, msg.sample_count)
            except Exception as e:
                self._fail(session, e)
                raise

            broken = False

            def send(out: Message) -> None:
                nonlocal broken
                if broken:
                    return
                try:
                    reply(out)
                except ConnectionError as e:
                    broken = True
                    self.logger.warning(f"session {msg.session_id}: device went away: {e}")

            def report(summary: EpochSummary) -> None:
                status = MsgTrainStatus(summary.epoch, summary.mean_loss, summary.step_count)
                session.statuses.append(status)
                self.status.emit(
                    "epoch",
                    session=msg.session_id,
                    epoch=summary.epoch,
                    loss=summary.mean_loss,
                    steps=summary.step_count,
                )
                send(status)

            send(MsgAck(MsgType.EPOCH_DONE, 0))
            self.status.emit("sealed", session=msg.session_id, records=len(session.cache))
            trainer = session.trainer
            try:
                if trainer.epoch_losses:
                    report(finish_epoch(trainer))
                run_cached_epochs(
                    trainer,
                    session.cache,
                    self.options.epochs - 1,
                    self.options.tol,
                    self.options.patience,
                    on_epoch=report,
                    logger=self.logger,
                )
                deploy = self._deploy(session)
            except Exception as e:
                self._fail(session, e)
                send(MsgError(ErrorCode.BAD_STATE, f"training failed: {session.failed}"))
                return
            send(deploy)

    def _seal(self, session: Session, sample_count: int) -> None:
        session.train_queue.join()
        cache = session.cache
        if not cache.sealed:
            cache.seal(sample_count)
        elif sample_count != cache.sample_count:
            raise CountMismatchError(
                f"sealing with {sample_count} samples, cached {cache.sample_count}, "
                f"announced {cache.dataset_size}"
            )

    def _deploy(self, session: Session) -> MsgDeploySideNet:
        deploy = deploy_side_network(session.trainer)
        path = self.side_network_path(session.init.session_id)
        path.write_bytes(deploy.side_network)
        session.deployed = deploy.side_network
        session.train_queue.close()
        session.cache.close()
        self.status.emit(
            "deployed",
            session=session.init.session_id,
            epochs=len(session.trainer.loss_history),
            steps=session.trainer.step_count,
            bytes=len(deploy.side_network),
        )
        return deploy

    def serve_connection(self, conn: FrameConnection) -> None:
        """Drive one ordered frame stream until the peer closes it."""
        try:
            while True:
                try:
                    msg = conn.recv()
                except ConnectionError as e:
                    self.logger.debug(f"connection closed: {e}")
                    return
                except ProtocolError as e:
                    self.logger.warning(f"undecodable frame, dropping connection: {e}")
                    try:
                        conn.send(MsgError(ErrorCode.PROTOCOL, str(e)))
                    except ConnectionError:
                        pass
                    return
                try:
                    self.handle(msg, conn.send)
                except ConnectionError as e:
                    self.logger.debug(f"reply failed, connection closed: {e}")
                    return
        finally:
            conn.close()

    def serve_forever(
        self,
        host: str,
        port: int,
        *,
        ready: Optional[Callable[[int], None]] = None,
        stop: Optional[threading.Event] = None,
    ) -> None:
        """Accept TCP connections, one thread per connection, until ``stop`` is set."""
        with socket.create_server((host, port)) as listener:
            listener.settimeout(0.2)
            bound = listener.getsockname()[1]
            self.status.emit("listening", host=host, port=bound)
            if ready is not None:
                ready(bound)
            while stop is None or not stop.is_set():
                try:
                    sock, addr = listener.accept()
                except TimeoutError:
                    continue
                sock.settimeout(None)
                self.logger.info(f"connection from {addr[0]}:{addr[1]}")
                threading.Thread(
                    target=self.serve_connection,
                    args=(FrameConnection(SocketTransport(sock)),),
                    name=f"pae-conn-{addr[1]}",
                    daemon=True,
                ).start()
