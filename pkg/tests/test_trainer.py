"""Tests for server/trainer.py module."""

import numpy as np
import pytest

from pae.errors import ConfigError, UsageError
from pae.model import OptimizerKind
from pae.numerics import SeededRng
from pae.privacy import NonceKey, fuse_output
from pae.server.cache import ActivationCache
from pae.server.trainer import (
    apply_step,
    batch_order,
    epoch_learning_rate,
    finish_epoch,
    init_trainer,
    run_cached_epochs,
    train_epoch,
)
from pae.side_network import init_optimizer_state, side_forward, train_step

from .fixtures import create_init, create_record, create_side_config
from .mocks import MockLogger


def _sealed_cache(path, batches=3):
    init = create_init(num_classes=3, dataset_size=4 * batches)
    cache = ActivationCache.create(
        path, 1, 2, 8, 3, init.dataset_size, logger=MockLogger()
    )
    records = [create_record(init, i) for i in range(batches)]
    for r in records:
        cache.append(r.batch_index, r.sample_ids, r.activations, r.delta_y)
    cache.seal(init.dataset_size)
    return cache, records


def test_batch_order_is_a_seeded_permutation():
    order = batch_order(7, 2, 10)
    assert sorted(order) == list(range(10))
    assert order == batch_order(7, 2, 10)
    assert batch_order(7, 2, 10) != batch_order(7, 3, 10)


def test_finish_epoch_needs_steps():
    state = init_trainer(create_side_config())
    with pytest.raises(UsageError, match="no training steps"):
        finish_epoch(state)


def test_finish_epoch_records_mean_loss():
    state = init_trainer(create_side_config())
    rng = SeededRng(1)
    losses = [apply_step(state, [rng.normal((4, 8)) for _ in range(2)], rng.normal((4, 3)))]
    losses.append(apply_step(state, [rng.normal((4, 8)) for _ in range(2)], rng.normal((4, 3))))
    summary = finish_epoch(state)
    assert summary.epoch == 1
    assert summary.step_count == 2
    assert summary.mean_loss == pytest.approx(sum(losses) / 2)
    assert state.loss_history == [summary.mean_loss]


def test_cached_epochs_need_a_sealed_cache(tmp_path):
    cache = ActivationCache.create(tmp_path / "c.paec", 1, 2, 8, 3, 4, logger=MockLogger())
    with pytest.raises(UsageError, match="sealed"):
        run_cached_epochs(init_trainer(create_side_config()), cache, 2, logger=MockLogger())


def test_cached_training_matches_live_replay(tmp_path):
    cache, records = _sealed_cache(tmp_path / "c.paec")
    config = create_side_config()

    cached = init_trainer(config, shuffle_seed=5)
    train_epoch(cached, cache.records)
    run_cached_epochs(cached, cache, 3, tol=-1.0, logger=MockLogger())

    live = init_trainer(config, shuffle_seed=5)
    for r in records:
        apply_step(
            live, [r.activations[i].astype(np.float64) for i in range(2)], r.delta_y.astype(np.float64)
        )
    finish_epoch(live)
    for epoch in (2, 3, 4):
        for i in batch_order(5, epoch, len(records)):
            r = records[i]
            apply_step(
                live,
                [r.activations[j].astype(np.float64) for j in range(2)],
                r.delta_y.astype(np.float64),
            )
        finish_epoch(live)

    assert cached.loss_history == live.loss_history
    for a, b in zip(cached.net.params.arrays(), live.net.params.arrays()):
        assert np.array_equal(a, b)


@pytest.mark.parametrize(
    "optimizer,learning_rate",
    [(OptimizerKind.SGD, 0.05), (OptimizerKind.ADAM, 1e-2)],
)
def test_bias_absorbs_constant_target_shift(optimizer, learning_rate):
    config = create_side_config(optimizer=optimizer, learning_rate=learning_rate)
    nonce = NonceKey(values=np.array([0.4, -0.7, 0.25]), session_id=1, rng_seed=0)
    zero = NonceKey(values=np.zeros(3), session_id=1, rng_seed=0)
    plain = init_trainer(config)
    shifted = init_trainer(config, head_bias=nonce.values)
    rng = SeededRng(11)
    for _ in range(25):
        acts = [rng.normal((4, 8)) for _ in range(2)]
        dy = rng.uniform(-1.0, 1.0, (4, 3))
        loss_plain = apply_step(plain, acts, dy)
        loss_shifted = apply_step(shifted, acts, dy + nonce.values)
        assert loss_shifted == pytest.approx(loss_plain, abs=1e-9)
        np.testing.assert_allclose(
            shifted.net.head_b - plain.net.head_b, nonce.values, rtol=0, atol=1e-9
        )
        for name in ("alpha", "w_down", "w_up", "head_w"):
            np.testing.assert_allclose(
                getattr(shifted.net, name), getattr(plain.net, name), rtol=0, atol=1e-9
            )

    acts = [rng.normal((4, 8)) for _ in range(2)]
    y_pre = rng.uniform(0.0, 1.0, (4, 3))
    fused_plain = fuse_output(y_pre, side_forward(plain.net, acts)[0], zero)
    fused_shifted = fuse_output(y_pre, side_forward(shifted.net, acts)[0], nonce)
    np.testing.assert_allclose(fused_shifted, fused_plain, rtol=0, atol=1e-9)
    assert np.array_equal(np.argmax(fused_shifted, axis=1), np.argmax(fused_plain, axis=1))


def test_early_stop_on_stalled_loss(tmp_path):
    cache, _ = _sealed_cache(tmp_path / "c.paec")
    state = init_trainer(create_side_config())
    train_epoch(state, cache.records)
    seen = []
    logger = MockLogger()
    run_cached_epochs(
        state, cache, 10, tol=1e9, patience=2, on_epoch=seen.append, logger=logger
    )
    assert len(state.loss_history) == 3
    assert [s.epoch for s in seen] == [2, 3]
    assert any("converged after epoch 3" in m for m in logger.infos)


def test_cached_epochs_run_full_budget_when_improving(tmp_path):
    cache, _ = _sealed_cache(tmp_path / "c.paec")
    state = init_trainer(create_side_config())
    train_epoch(state, cache.records)
    run_cached_epochs(state, cache, 4, tol=-1.0, logger=MockLogger())
    assert len(state.loss_history) == 5
    assert state.epoch == 5
    assert state.step_count == 15


def test_learning_rate_decays_per_epoch():
    config = create_side_config(optimizer=OptimizerKind.SGD, learning_rate=0.1)
    state = init_trainer(config, lr_decay=0.5)
    rng = SeededRng(4)
    assert epoch_learning_rate(state) == pytest.approx(0.1)
    apply_step(state, [rng.normal((4, 8)) for _ in range(2)], rng.normal((4, 3)))
    finish_epoch(state)
    assert epoch_learning_rate(state) == pytest.approx(0.05)

    acts = [rng.normal((4, 8)) for _ in range(2)]
    dy = rng.normal((4, 3))
    expected = state.net.copy()
    train_step(expected, init_optimizer_state(expected), acts, dy, 0.05)
    apply_step(state, acts, dy)
    for a, b in zip(state.net.params.arrays(), expected.params.arrays()):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@pytest.mark.parametrize("lr_decay", [0.0, -0.5, 1.5])
def test_init_trainer_rejects_bad_lr_decay(lr_decay):
    with pytest.raises(ConfigError, match="lr_decay"):
        init_trainer(create_side_config(), lr_decay=lr_decay)
