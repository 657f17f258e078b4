"""Tests for server/service.py module."""

import threading

import numpy as np
import pytest

from pae.errors import (
    ConfigError,
    DimensionError,
    ErrorCode,
    RemoteError,
    SealedCacheError,
)
from pae.protocol import (
    FrameConnection,
    MsgAck,
    MsgDeploySideNet,
    MsgEpochDone,
    MsgError,
    MsgFullActivationRecord,
    MsgTrainStatus,
    MsgType,
    SocketTransport,
    loopback_pair,
)
from pae.server.cache import ActivationCache
from pae.server.service import (
    PaeServer,
    ServerOptions,
    ThreadedTrainQueue,
    error_code,
)
from pae.side_network import deserialize_side_network

from .fixtures import create_init, create_record, create_server
from .mocks import MockLogger, MockStatus


def _run(server, msg):
    replies = []
    server.handle(msg, replies.append)
    return replies


def _server(tmp_path, **options):
    options.setdefault("epochs", 3)
    return PaeServer(
        ServerOptions(cache_dir=tmp_path, threaded_training=False, **options),
        logger=MockLogger(),
        status=MockStatus(),
    )


def _feed(server, init, batches=2):
    assert _run(server, init) == [MsgAck(MsgType.INIT, 0)]
    for i in range(batches):
        assert _run(server, create_record(init, i)) == [MsgAck(MsgType.ACTIVATION_RECORD, i)]


def test_init_creates_session_and_cache(tmp_path):
    server = _server(tmp_path)
    init = create_init(session_id=7)
    assert _run(server, init) == [MsgAck(MsgType.INIT, 0)]
    assert 7 in server.sessions
    assert server.cache_path(7).exists()
    assert server.status.events() == ["session"]


def test_identical_reinit_is_idempotent(tmp_path):
    server = _server(tmp_path)
    init = create_init()
    _feed(server, init, 1)
    assert _run(server, init) == [MsgAck(MsgType.INIT, 0)]
    assert len(server.sessions[1].cache) == 1


def test_conflicting_reinit_is_rejected(tmp_path):
    server = _server(tmp_path)
    _run(server, create_init())
    (reply,) = _run(server, create_init(dataset_size=12))
    assert isinstance(reply, MsgError)
    assert reply.code == ErrorCode.CONFIG_CONFLICT


def test_single_session_rejects_second_live_session(tmp_path):
    server = _server(tmp_path)
    _run(server, create_init(session_id=1))
    (reply,) = _run(server, create_init(session_id=2))
    assert reply.code == ErrorCode.BAD_STATE
    assert "still live" in reply.message


def test_multi_session_allows_concurrent_sessions(tmp_path):
    server = _server(tmp_path, multi_session=True)
    _feed(server, create_init(session_id=1), 1)
    _feed(server, create_init(session_id=2), 1)
    assert set(server.sessions) == {1, 2}


def test_new_session_after_deploy_replaces_finished_one(tmp_path):
    server = _server(tmp_path)
    init = create_init(session_id=1)
    _feed(server, init)
    _run(server, MsgEpochDone(1, 8))
    assert _run(server, create_init(session_id=2)) == [MsgAck(MsgType.INIT, 0)]
    assert set(server.sessions) == {2}


def test_record_without_session(tmp_path):
    server = _server(tmp_path)
    (reply,) = _run(server, create_record(create_init()))
    assert reply.code == ErrorCode.NO_SESSION


def test_replayed_record_is_reacked_without_training(tmp_path):
    server = _server(tmp_path)
    init = create_init()
    _feed(server, init, 1)
    steps = server.sessions[1].trainer.step_count
    assert _run(server, create_record(init, 0)) == [MsgAck(MsgType.ACTIVATION_RECORD, 0)]
    assert server.sessions[1].trainer.step_count == steps == 1


def test_duplicate_sample_ids_are_rejected(tmp_path):
    server = _server(tmp_path)
    init = create_init()
    _feed(server, init, 1)
    (reply,) = _run(server, create_record(init, 1, sample_ids=(3, 4, 5, 6)))
    assert reply.code == ErrorCode.DUPLICATE_SAMPLE


def test_record_dimension_errors(tmp_path):
    server = _server(tmp_path)
    init = create_init()
    _run(server, init)
    wrong_hidden = create_init(hidden_size=6)
    (reply,) = _run(server, create_record(wrong_hidden, 0))
    assert reply.code == ErrorCode.DIMENSION_MISMATCH
    wrong_layers = create_init(num_layers=3)
    (reply,) = _run(server, create_record(wrong_layers, 0))
    assert reply.code == ErrorCode.DIMENSION_MISMATCH
    (reply,) = _run(server, create_record(create_init(batch_size=5), 0))
    assert reply.code == ErrorCode.DIMENSION_MISMATCH
    assert len(server.sessions[1].cache) == 0


def test_epoch_done_reply_sequence(tmp_path):
    server = _server(tmp_path, epochs=3, tol=-1.0)
    init = create_init()
    _feed(server, init)
    replies = _run(server, MsgEpochDone(1, 8))
    assert replies[0] == MsgAck(MsgType.EPOCH_DONE, 0)
    statuses = replies[1:-1]
    assert all(isinstance(s, MsgTrainStatus) for s in statuses)
    assert [s.epoch for s in statuses] == [1, 2, 3]
    assert [s.step_count for s in statuses] == [2, 4, 6]
    assert isinstance(replies[-1], MsgDeploySideNet)

    net = deserialize_side_network(replies[-1].side_network)
    assert net.config == init.side_config()
    assert server.side_network_path(1).read_bytes() == replies[-1].side_network
    assert server.status.events()[-1] == "deployed"
    assert ActivationCache.recover(server.cache_path(1)).sealed


def test_epoch_budget_of_one_deploys_after_epoch_one(tmp_path):
    server = _server(tmp_path, epochs=1)
    _feed(server, create_init())
    replies = _run(server, MsgEpochDone(1, 8))
    assert [type(r) for r in replies] == [MsgAck, MsgTrainStatus, MsgDeploySideNet]


def test_records_after_seal_are_rejected(tmp_path):
    server = _server(tmp_path)
    init = create_init()
    _feed(server, init)
    _run(server, MsgEpochDone(1, 8))
    (reply,) = _run(server, create_record(init, 5, sample_ids=(40, 41, 42, 43)))
    assert reply.code == ErrorCode.CACHE_SEALED


def test_epoch_done_count_mismatch(tmp_path):
    server = _server(tmp_path)
    _feed(server, create_init(), 1)
    (reply,) = _run(server, MsgEpochDone(1, 8))
    assert reply.code == ErrorCode.COUNT_MISMATCH
    assert not server.sessions[1].cache.sealed


def test_epoch_done_after_deploy_refetches(tmp_path):
    server = _server(tmp_path)
    _feed(server, create_init())
    first = _run(server, MsgEpochDone(1, 8))
    again = _run(server, MsgEpochDone(1, 8))
    assert again == [MsgAck(MsgType.EPOCH_DONE, 0), first[-1]]


def test_lost_connection_does_not_stop_training(tmp_path):
    server = _server(tmp_path)
    _feed(server, create_init())
    sent = []

    def reply(msg):
        if isinstance(msg, MsgTrainStatus):
            raise ConnectionError("gone")
        sent.append(msg)

    server.handle(MsgEpochDone(1, 8), reply)
    assert sent == [MsgAck(MsgType.EPOCH_DONE, 0)]
    assert server.sessions[1].finished
    refetch = _run(server, MsgEpochDone(1, 8))
    assert isinstance(refetch[-1], MsgDeploySideNet)


def test_full_record_selects_pivots(tmp_path):
    server = _server(tmp_path, multi_session=True)
    init = create_init(batch_size=2, dataset_size=2)
    _run(server, init)
    rng = np.random.default_rng(0)
    hidden = rng.normal(size=(2, 2, 5, 8)).astype(np.float32)
    dy = rng.uniform(-1, 1, (2, 3)).astype(np.float32)
    full = MsgFullActivationRecord(1, 1, 0, (0, 1), (4, 2), hidden, dy)
    assert _run(server, full) == [MsgAck(MsgType.FULL_ACTIVATION_RECORD, 0)]
    cached = server.sessions[1].cache.get(0)
    assert np.array_equal(cached.activations[:, 0], hidden[:, 0, 4])
    assert np.array_equal(cached.activations[:, 1], hidden[:, 1, 2])

    bad = MsgFullActivationRecord(1, 1, 1, (2, 3), (5, 0), hidden, dy)
    (reply,) = _run(server, bad)
    assert reply.code == ErrorCode.DIMENSION_MISMATCH


def test_unexpected_message_is_bad_state(tmp_path):
    server = _server(tmp_path)
    (reply,) = _run(server, MsgTrainStatus(1, 0.5, 1))
    assert reply.code == ErrorCode.BAD_STATE


def test_error_code_mapping():
    assert error_code(SealedCacheError("x")) == ErrorCode.CACHE_SEALED
    assert error_code(DimensionError("x")) == ErrorCode.DIMENSION_MISMATCH
    assert error_code(ConfigError("x")) == ErrorCode.CONFIG_CONFLICT
    assert error_code(RemoteError(ErrorCode.NO_SESSION, "x")) == ErrorCode.NO_SESSION
    assert error_code(RuntimeError("x")) == ErrorCode.BAD_STATE


def test_server_rejects_zero_epochs(tmp_path):
    with pytest.raises(ConfigError):
        create_server(tmp_path, epochs=0)


def test_server_rejects_bad_lr_decay(tmp_path):
    for decay in (0.0, 1.5):
        with pytest.raises(ConfigError, match="lr_decay"):
            create_server(tmp_path, lr_decay=decay)


def test_session_trainer_uses_server_lr_decay(tmp_path):
    server = _server(tmp_path, lr_decay=0.5)
    _run(server, create_init())
    assert server.sessions[1].trainer.lr_decay == 0.5


def test_restart_resumes_cached_records(tmp_path):
    init = create_init()
    reference = _server(tmp_path / "reference")
    _feed(reference, init)
    expected = _run(reference, MsgEpochDone(1, 8))

    first = _server(tmp_path / "restart")
    _feed(first, init, 1)
    first.sessions[1].cache.close()

    second = _server(tmp_path / "restart")
    assert _run(second, init) == [MsgAck(MsgType.INIT, 0)]
    session = second.sessions[1]
    assert len(session.cache) == 1
    assert session.trainer.step_count == 1
    # batch 0 was cached before the restart; the device re-sends it when its ack was lost
    for i in range(2):
        assert _run(second, create_record(init, i)) == [MsgAck(MsgType.ACTIVATION_RECORD, i)]
    assert session.trainer.step_count == 2
    assert _run(second, MsgEpochDone(1, 8)) == expected


def test_restart_resumes_sealed_cache(tmp_path):
    init = create_init()
    reference = _server(tmp_path / "reference")
    _feed(reference, init)
    expected = _run(reference, MsgEpochDone(1, 8))

    first = _server(tmp_path / "restart")
    _feed(first, init)
    first.sessions[1].train_queue.join()
    first.sessions[1].cache.seal(8)
    first.sessions[1].cache.close()

    second = _server(tmp_path / "restart")
    _run(second, init)
    assert second.sessions[1].cache.sealed
    assert _run(second, MsgEpochDone(1, 8)) == expected
    (reply,) = _run(second, create_record(init, 2, sample_ids=(8, 9, 10, 11)))
    assert reply.code == ErrorCode.CACHE_SEALED


def test_restart_refetches_deployed_network(tmp_path):
    init = create_init()
    first = _server(tmp_path)
    _feed(first, init)
    deployed = _run(first, MsgEpochDone(1, 8))[-1]

    second = _server(tmp_path)
    assert _run(second, init) == [MsgAck(MsgType.INIT, 0)]
    assert second.sessions[1].finished
    assert _run(second, MsgEpochDone(1, 8)) == [MsgAck(MsgType.EPOCH_DONE, 0), deployed]


def test_restart_with_other_layout_starts_over(tmp_path):
    first = _server(tmp_path)
    _feed(first, create_init(), 1)
    first.sessions[1].cache.close()

    second = _server(tmp_path)
    assert _run(second, create_init(dataset_size=12)) == [MsgAck(MsgType.INIT, 0)]
    assert len(second.sessions[1].cache) == 0
    assert any("starting over" in m for m in second.logger.warnings)


def test_restart_with_torn_cache_keeps_good_records(tmp_path):
    init = create_init()
    first = _server(tmp_path)
    _feed(first, init)
    first.sessions[1].cache.close()
    path = first.cache_path(1)
    path.write_bytes(path.read_bytes()[:-5])

    second = _server(tmp_path)
    _run(second, init)
    assert len(second.sessions[1].cache) == 1
    assert _run(second, create_record(init, 1)) == [MsgAck(MsgType.ACTIVATION_RECORD, 1)]
    assert isinstance(_run(second, MsgEpochDone(1, 8))[-1], MsgDeploySideNet)


def test_failed_seal_ends_the_session(tmp_path):
    server = _server(tmp_path)
    init = create_init()
    _feed(server, init, 1)
    (reply,) = _run(server, MsgEpochDone(1, 8))
    assert reply.code == ErrorCode.COUNT_MISMATCH
    assert server.sessions[1].failed is not None
    assert not server.sessions[1].live
    assert "failed" in server.status.events()

    (reply,) = _run(server, create_record(init, 1))
    assert reply.code == ErrorCode.BAD_STATE
    (reply,) = _run(server, MsgEpochDone(1, 8))
    assert reply.code == ErrorCode.BAD_STATE

    assert _run(server, create_init(session_id=2)) == [MsgAck(MsgType.INIT, 0)]
    assert set(server.sessions) == {2}


def test_failed_session_can_start_over(tmp_path):
    server = _server(tmp_path)
    init = create_init()
    _feed(server, init, 1)
    _run(server, MsgEpochDone(1, 8))

    _feed(server, init)
    assert server.sessions[1].live
    assert len(server.sessions[1].cache) == 2
    assert isinstance(_run(server, MsgEpochDone(1, 8))[-1], MsgDeploySideNet)


def test_training_failure_ends_the_session(tmp_path, monkeypatch):
    def diverge(*args, **kwargs):
        raise ValueError("loss diverged")

    monkeypatch.setattr("pae.server.service.run_cached_epochs", diverge)
    server = _server(tmp_path)
    _feed(server, create_init())
    replies = _run(server, MsgEpochDone(1, 8))
    assert replies[0] == MsgAck(MsgType.EPOCH_DONE, 0)
    assert isinstance(replies[-1], MsgError)
    assert replies[-1].code == ErrorCode.BAD_STATE
    assert "loss diverged" in replies[-1].message
    assert not server.sessions[1].live
    assert _run(server, create_init(session_id=2)) == [MsgAck(MsgType.INIT, 0)]


def test_training_does_not_block_other_sessions(tmp_path):
    server = _server(tmp_path, multi_session=True)
    _feed(server, create_init())
    acked = threading.Event()
    release = threading.Event()

    def slow_reply(msg):
        if isinstance(msg, MsgAck):
            acked.set()
            release.wait(5)

    training = threading.Thread(target=server.handle, args=(MsgEpochDone(1, 8), slow_reply))
    training.start()
    assert acked.wait(5)

    replies = []
    other = threading.Thread(target=server.handle, args=(create_init(session_id=2), replies.append))
    other.start()
    other.join(5)
    blocked = other.is_alive()
    release.set()
    training.join(5)
    other.join(5)

    assert not blocked
    assert replies == [MsgAck(MsgType.INIT, 0)]
    assert server.sessions[1].finished


def test_threaded_queue_runs_tasks_in_order():
    q = ThreadedTrainQueue(2)
    seen = []
    for i in range(10):
        q.submit(lambda i=i: seen.append(i))
    q.join()
    q.close()
    assert seen == list(range(10))


def test_threaded_queue_reraises_task_failure():
    q = ThreadedTrainQueue(2)

    def boom():
        raise ValueError("step failed")

    q.submit(boom)
    with pytest.raises(ValueError, match="step failed"):
        q.join()
    with pytest.raises(ValueError):
        q.submit(lambda: None)
    q.close()


def test_threaded_training_matches_inline(tmp_path):
    init = create_init()
    nets = []
    for threaded in (False, True):
        server = create_server(
            tmp_path / str(threaded), epochs=2, threaded_training=threaded, train_queue_depth=1
        )
        _feed(server, init)
        nets.append(_run(server, MsgEpochDone(1, 8))[-1].side_network)
    assert nets[0] == nets[1]


def test_serve_connection_over_loopback(tmp_path):
    server = _server(tmp_path)
    device, remote = loopback_pair(timeout=10.0)
    worker = threading.Thread(target=server.serve_connection, args=(FrameConnection(remote),))
    worker.start()
    conn = FrameConnection(device)
    init = create_init()
    conn.send(init)
    assert conn.recv() == MsgAck(MsgType.INIT, 0)
    conn.send(create_record(init, 0))
    assert conn.recv() == MsgAck(MsgType.ACTIVATION_RECORD, 0)
    device.send(b"garbage-bytes-here")
    reply = conn.recv()
    assert isinstance(reply, MsgError) and reply.code == ErrorCode.PROTOCOL
    worker.join(timeout=10)
    assert not worker.is_alive()


def test_serve_forever_accepts_tcp(tmp_path):
    server = _server(tmp_path)
    stop = threading.Event()
    ports = []
    ready = threading.Event()

    def on_ready(port):
        ports.append(port)
        ready.set()

    thread = threading.Thread(
        target=server.serve_forever, args=("127.0.0.1", 0), kwargs={"ready": on_ready, "stop": stop}
    )
    thread.start()
    try:
        assert ready.wait(10)
        conn = FrameConnection(SocketTransport.connect("127.0.0.1", ports[0], timeout=10.0))
        conn.send(create_init())
        assert conn.recv() == MsgAck(MsgType.INIT, 0)
        conn.close()
    finally:
        stop.set()
        thread.join(timeout=10)
    assert server.status.events()[0] == "listening"
