"""Tests for accounting.py module."""

import csv
import io
import math
from dataclasses import replace

import pytest

from pae.accounting import (
    COST_COLUMNS,
    LEAK_COLUMNS,
    MB,
    METRICS_COLUMNS,
    CostModelInput,
    RunMetrics,
    batch_time,
    comm_cost,
    comp_cost,
    cost_row,
    leak_rows,
    metrics_row,
    parse_sweep,
    report,
    sweep_inputs,
    time_row,
)
from pae.errors import UsageError
from pae.model import CostMethod, ReportFormat

REFERENCE = CostModelInput(
    num_layers=24, seq_len=256, hidden_size=2048, num_classes=2, batch_size=8, float_width=2
)


def test_pivot_bytes_per_batch_for_reference_shape():
    comm = comm_cost(REFERENCE)
    assert comm.per_batch == 8 * (24 * 2048 + 2) * 2
    assert comm.per_batch / MB == pytest.approx(0.78, rel=0.02)


def test_full_activation_bytes_per_batch():
    comm = comm_cost(replace(REFERENCE, method=CostMethod.FULL_ACTIVATION_SIDE_TUNE))
    assert comm.per_batch == 8 * 256 * 2048 * 24 * 2
    assert comm.per_batch / MB == pytest.approx(201.3, rel=0.001)
    assert comm.per_batch / MB == pytest.approx(200.4, rel=0.05)


def test_split_learning_bytes_per_batch():
    comm = comm_cost(replace(REFERENCE, method=CostMethod.SPLIT_LEARNING))
    assert comm.per_batch / MB == pytest.approx(33.55, rel=0.001)


def test_device_local_sends_nothing():
    comm = comm_cost(replace(REFERENCE, method=CostMethod.DEVICE_LOCAL))
    assert (comm.per_batch, comm.total) == (0, 0)


def test_pae_transmits_only_once():
    inp = replace(REFERENCE, epochs=20, batches_per_epoch=7)
    pae = comm_cost(inp)
    assert pae.total == pae.per_epoch == 7 * pae.per_batch
    full = comm_cost(replace(inp, method=CostMethod.FULL_ACTIVATION_SIDE_TUNE))
    assert full.total == 20 * full.per_epoch


def test_device_compute_reduction_tracks_epochs():
    inp = replace(REFERENCE, epochs=13)
    pae = comp_cost(inp)
    iterative = comp_cost(replace(inp, method=CostMethod.FULL_ACTIVATION_SIDE_TUNE))
    assert iterative.total_flops / pae.total_flops == pytest.approx(13.1, rel=0.1)
    assert pae.per_epoch_flops == 2 * 12 * 24 * 2048**2 * 8 * 256


def test_device_local_trains_with_six_flops_per_param():
    local = comp_cost(replace(REFERENCE, method=CostMethod.DEVICE_LOCAL, epochs=1))
    assert local.total_flops == 3 * comp_cost(REFERENCE).total_flops


def test_pivot_bytes_are_flat_in_sequence_length():
    pae = [comm_cost(replace(REFERENCE, seq_len=s)).per_batch for s in (64, 128, 256, 512)]
    assert len(set(pae)) == 1
    full = [
        comm_cost(
            replace(REFERENCE, seq_len=s, method=CostMethod.FULL_ACTIVATION_SIDE_TUNE)
        ).per_batch
        for s in (64, 128, 256, 512)
    ]
    assert [f / full[0] for f in full] == [1, 2, 4, 8]


def test_validate_rejects_non_positive():
    with pytest.raises(UsageError, match="batch_size"):
        comm_cost(replace(REFERENCE, batch_size=0))


def test_batch_time_combines_stages():
    split = replace(REFERENCE, method=CostMethod.SPLIT_LEARNING)
    t = batch_time(split, 100.0)
    assert t.total == pytest.approx(t.comm + t.device + t.server)
    assert t.comm == pytest.approx(comm_cost(split).per_batch * 8 / 1e8)

    pae = batch_time(REFERENCE, 100.0)
    assert pae.total == max(pae.comm, pae.device, pae.server)
    local = batch_time(replace(REFERENCE, method=CostMethod.DEVICE_LOCAL), 100.0)
    assert local.total == local.device
    with pytest.raises(UsageError):
        batch_time(REFERENCE, 0.0)


def test_parse_sweep():
    assert parse_sweep("seq-len=64..512") == ("seq-len", [64, 128, 256, 512])
    assert parse_sweep("batch=2..8:2") == ("batch", [2, 4, 6, 8])
    assert parse_sweep("bandwidth=10,100, 1000") == ("bandwidth", [10, 100, 1000])
    assert parse_sweep("epochs = 0.5..1:0.25")[1] == [0.5, 0.75, 1.0]


@pytest.mark.parametrize(
    "sweep",
    ["seq-len", "width=1..2", "batch=8..2", "batch=0..4", "batch=1..4:0", "batch=", "batch=a,b"],
)
def test_parse_sweep_errors(sweep):
    with pytest.raises(UsageError):
        parse_sweep(sweep)


def test_sweep_inputs():
    points = sweep_inputs(
        REFERENCE, "seq-len", [64, 128], [CostMethod.PAE, CostMethod.SPLIT_LEARNING], 50.0
    )
    assert [(p.method, p.seq_len, bw) for p, bw in points] == [
        (CostMethod.PAE, 64, 50.0),
        (CostMethod.PAE, 128, 50.0),
        (CostMethod.SPLIT_LEARNING, 64, 50.0),
        (CostMethod.SPLIT_LEARNING, 128, 50.0),
    ]
    bandwidths = sweep_inputs(REFERENCE, "bandwidth", [10, 20], [CostMethod.PAE], 50.0)
    assert [bw for _, bw in bandwidths] == [10.0, 20.0]
    assert len(sweep_inputs(REFERENCE, None, [], [CostMethod.PAE], 50.0)) == 1


def test_cost_report_csv():
    rows = [cost_row(REFERENCE), cost_row(replace(REFERENCE, method=CostMethod.SPLIT_LEARNING))]
    text = report(COST_COLUMNS, rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert list(parsed[0]) == list(COST_COLUMNS)
    assert parsed[0]["method"] == "pae"
    assert int(parsed[0]["per_batch_bytes"]) == comm_cost(REFERENCE).per_batch
    assert float(parsed[1]["per_batch_mb"]) == pytest.approx(33.554432)


def test_time_row():
    row = time_row(REFERENCE, 100.0)
    assert row["batch_s"] == batch_time(REFERENCE, 100.0).total
    assert row["bandwidth_mbps"] == 100.0


def test_leak_rows():
    rows = leak_rows(3, 2000, seed=1)
    assert [r["masked"] for r in rows] == [False, True]
    assert rows[0]["recovery_rate"] == 1.0
    assert rows[1]["recovery_rate"] < 1.0
    assert "masked" in report(LEAK_COLUMNS, rows, ReportFormat.TABLE)


def test_metrics_row():
    metrics = RunMetrics(
        mode="pivot",
        seq_len=8,
        batch_size=4,
        samples=8,
        records=2,
        bytes_sent=1000,
        bytes_received=200,
        activation_bytes=512,
        delta_bytes=64,
        overhead_bytes=424,
        forward_count=8,
        step_count=6,
        epoch_losses=[0.5, 0.25, 0.125],
        phase_seconds={"epoch1": 0.1, "total": 0.3},
    )
    row = metrics_row(metrics)
    assert set(row) == set(METRICS_COLUMNS)
    assert row["epochs"] == 3
    assert row["final_loss"] == 0.125
    assert row["server_only_seconds"] == 0.0
    assert metrics.payload_bytes == 576
    assert metrics.payload_bytes_per_batch == 288.0


def test_metrics_row_without_epochs():
    metrics = RunMetrics("pivot", 8, 4, 0, 0, 0, 0, 0, 0, 0, 0, 0)
    assert math.isnan(metrics_row(metrics)["final_loss"])
    assert metrics.payload_bytes_per_batch == 0.0
