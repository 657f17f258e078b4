"""Tests for the command-line interface."""

import csv
import io

import pytest
from typer.testing import CliRunner

import pae.main
from pae.device.session import SIDE_FILE, load_session
from pae.errors import UsageError
from pae.main import app, parse_server
from pae.simulate import LoopbackConnector

from .fixtures import create_server

runner = CliRunner()

TINY_CONFIG = """\
# small enough for a unit test
num_layers = 2
hidden_size = 8
num_heads = 2
seq_len = 6
vocab_size = 12
num_classes = 2
bottleneck = 4
learning_rate = 0.01
dataset_size = 16
batch_size = 4
epochs = 2
retry_base_delay = 0
"""


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    monkeypatch.setattr(pae.main, "configure_logging", lambda: None)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


def _csv(text: str) -> list[dict[str, str]]:
    lines = [line for line in text.splitlines() if not line.startswith("event=")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


def test_version():
    result = runner.invoke(app, ["--version"])
    assert result.exit_code == 0
    assert "pae version: 0.1.0" in result.output


def test_parse_server():
    assert parse_server("10.0.0.2:7431") == ("10.0.0.2", 7431)
    assert parse_server("[::1]:80") == ("[::1]", 80)
    for bad in ("localhost", ":80", "host:port"):
        with pytest.raises(UsageError):
            parse_server(bad)


def test_report_cost_defaults():
    result = runner.invoke(app, ["report"])
    assert result.exit_code == 0, result.output
    rows = _csv(result.output)
    assert [r["method"] for r in rows] == [
        "pae",
        "full-activation",
        "split-learning",
        "device-local",
    ]
    assert int(rows[0]["per_batch_bytes"]) == 8 * (24 * 2048 + 2) * 2


def test_report_sweep():
    result = runner.invoke(app, ["report", "--sweep", "seq-len=64..512", "--method", "pae"])
    assert result.exit_code == 0, result.output
    rows = _csv(result.output)
    assert [int(r["seq_len"]) for r in rows] == [64, 128, 256, 512]
    assert len({r["per_batch_bytes"] for r in rows}) == 1


def test_report_time_table():
    result = runner.invoke(
        app, ["report", "--model", "time", "--sweep", "bandwidth=10,100", "--format", "table"]
    )
    assert result.exit_code == 0, result.output
    assert "bandwidth_mbps" in result.output.splitlines()[0]


def test_report_leak():
    result = runner.invoke(app, ["report", "--model", "leak", "--classes", "3", "--trials", "500"])
    assert result.exit_code == 0, result.output
    rows = _csv(result.output)
    assert [r["masked"] for r in rows] == ["false", "true"]
    assert float(rows[0]["recovery_rate"]) == 1.0


def test_report_bad_format_is_usage_error():
    result = runner.invoke(app, ["report", "--format", "json"])
    assert result.exit_code == 2
    assert "Unknown report format" in result.output


def test_report_bad_sweep_is_usage_error():
    result = runner.invoke(app, ["report", "--sweep", "width=1..4"])
    assert result.exit_code == 2
    assert "Error:" in result.output


def test_simulate(config_file):
    result = runner.invoke(app, ["simulate", "--config", str(config_file)])
    assert result.exit_code == 0, result.output
    assert "event=deployed" in result.output
    (row,) = _csv(result.output)
    assert row["mode"] == "pivot"
    assert int(row["forward_count"]) == 16
    assert int(row["epochs"]) == 2


def test_simulate_rejects_bad_config(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("batch_size = 0\n", encoding="utf-8")
    result = runner.invoke(app, ["simulate", "--config", str(path)])
    assert result.exit_code == 1
    assert "batch_size" in result.output


def test_device_then_predict(tmp_path, config_file, monkeypatch):
    server = create_server(tmp_path / "cache", epochs=2)
    connector = LoopbackConnector(server, timeout=10.0)

    class LoopbackSocket:
        @staticmethod
        def connect(host, port, timeout=None):
            assert (host, port) == ("127.0.0.1", 7431)
            return connector()

    monkeypatch.setattr(pae.main, "SocketTransport", LoopbackSocket)
    session_dir = tmp_path / "session"
    result = runner.invoke(
        app, ["device", "--config", str(config_file), "--session-dir", str(session_dir)]
    )
    assert result.exit_code == 0, result.output
    assert "event=deployed" in result.output
    assert "forward_passes=16" in result.output
    assert (session_dir / SIDE_FILE).exists()
    assert load_session(session_dir).side_network is not None

    data = tmp_path / "inputs.tsv"
    data.write_text("0\tsome words here\n1\tmore words\n", encoding="utf-8")
    result = runner.invoke(
        app, ["predict", "--model-dir", str(session_dir), "--input", str(data)]
    )
    assert result.exit_code == 0, result.output
    rows = _csv(result.output)
    assert [r["row"] for r in rows] == ["0", "1"]
    assert {r["correct"] for r in rows} <= {"true", "false"}


def test_predict_without_deployment(tmp_path, config_file, monkeypatch):
    class DeadSocket:
        @staticmethod
        def connect(host, port, timeout=None):
            raise ConnectionError("connection refused")

    monkeypatch.setattr(pae.main, "SocketTransport", DeadSocket)
    monkeypatch.setenv("PAE_SESSION_DIR", str(tmp_path / "session"))
    result = runner.invoke(app, ["device", "--config", str(config_file)])
    assert result.exit_code == 1
    assert "transmission aborted" in result.output

    data = tmp_path / "inputs.tsv"
    data.write_text("0\thello\n", encoding="utf-8")
    result = runner.invoke(app, ["predict", "--input", str(data)])
    assert result.exit_code == 2
    assert "no deployed side network" in result.output
