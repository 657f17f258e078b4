"""Command-line entry point: serve, device, predict, simulate and report."""

import threading
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import typer
from typing_extensions import Annotated

from . import __version__
from .accounting import (
    COST_COLUMNS,
    LEAK_COLUMNS,
    METRICS_COLUMNS,
    TIME_COLUMNS,
    CostModelInput,
    cost_row,
    leak_rows,
    metrics_row,
    parse_sweep,
    report,
    sweep_inputs,
    time_row,
)
from .backbone import build_backbone
from .config import RunConfig, load_config
from .device.dataset import dataset_from_config, ingest_delimited
from .device.pipeline import DevicePipeline, RetryPolicy
from .device.session import classify, load_session, predict, save_session
from .errors import CacheError, RemoteError, TransmissionAborted, UsageError
from .formatters import parse_report_format
from .interfaces import DefaultStatus, configure_logging
from .model import ActivationMode, CostMethod
from .privacy import generate_nonce
from .protocol.messages import MsgTrainStatus
from .protocol.transport import SocketTransport
from .server.service import PaeServer, ServerOptions
from .simulate import simulate as run_simulation

app = typer.Typer(add_completion=False, help="Pivot-activation side-tuning between a device and a server")


class ReportModel(str, Enum):
    COST = "cost"
    TIME = "time"
    LEAK = "leak"


def version_callback(value: bool):
    if value:
        print(f"pae version: {__version__}")
        raise typer.Exit()


def fail(error: Exception) -> typer.Exit:
    typer.echo(f"Error: {error}", err=True)
    return typer.Exit(2 if isinstance(error, UsageError) else 1)


HANDLED = (ValueError, UsageError, CacheError, RemoteError, TransmissionAborted, OSError)

ConfigOption = Annotated[
    Optional[Path],
    typer.Option("--config", envvar="PAE_CONFIG", help="Flat key = value configuration file"),
]


@app.callback()
def root(
    _version: Annotated[
        Optional[bool],
        typer.Option("--version", callback=version_callback, is_eager=True, help="Show version and exit"),
    ] = None,
):
    """pae - device/server collaborative side-tuning"""
    configure_logging()


def parse_server(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise UsageError(f"--server must be host:port, got {value!r}")
    return host, int(port)


@app.command()
def serve(
    config: ConfigOption = None,
    host: Annotated[Optional[str], typer.Option(envvar="PAE_HOST", help="Interface to bind")] = None,
    port: Annotated[Optional[int], typer.Option(envvar="PAE_PORT", help="TCP port (default 7431)")] = None,
    cache_dir: Annotated[
        Optional[Path], typer.Option(envvar="PAE_CACHE_DIR", help="Directory for activation caches")
    ] = None,
    epochs: Annotated[
        Optional[int], typer.Option(envvar="PAE_EPOCHS", help="Epoch budget, epoch 1 included")
    ] = None,
    multi_session: Annotated[
        Optional[bool],
        typer.Option("--multi-session/--single-session", envvar="PAE_MULTI_SESSION", help="Allow several live sessions"),
    ] = None,
):
    """Run the server: cache epoch-1 records, train, deploy."""
    try:
        cfg = load_config(
            config,
            {
                "host": host,
                "port": port,
                "cache_dir": cache_dir,
                "epochs": epochs,
                "multi_session": multi_session,
            },
        )
        server = PaeServer(
            ServerOptions(
                cache_dir=cfg.cache_dir,
                epochs=cfg.epochs,
                tol=cfg.tol,
                patience=cfg.patience,
                shuffle_seed=cfg.shuffle_seed,
                lr_decay=cfg.lr_decay,
                multi_session=cfg.multi_session,
            ),
            status=DefaultStatus(),
        )
        server.serve_forever(cfg.host, cfg.port, stop=threading.Event())
    except HANDLED as e:
        raise fail(e)
    except KeyboardInterrupt:
        raise typer.Exit(0)


@app.command()
def device(
    server: Annotated[
        str, typer.Option(envvar="PAE_SERVER", help="Server address as host:port")
    ] = "127.0.0.1:7431",
    data: Annotated[
        Optional[str], typer.Option(envvar="PAE_DATA", help="'synthetic' or a label<TAB>text file")
    ] = None,
    batch: Annotated[Optional[int], typer.Option(envvar="PAE_BATCH", help="Batch size")] = None,
    seq_len: Annotated[Optional[int], typer.Option(envvar="PAE_SEQ_LEN", help="Sequence length")] = None,
    mode: Annotated[
        Optional[ActivationMode], typer.Option(envvar="PAE_MODE", help="Transmit pivot or full activations")
    ] = None,
    session_dir: Annotated[
        Optional[Path], typer.Option(envvar="PAE_SESSION_DIR", help="Device session directory")
    ] = None,
    config: ConfigOption = None,
):
    """Run epoch 1 against a server and store the deployed side network."""
    status = DefaultStatus()
    try:
        cfg = load_config(
            config,
            {
                "data": data,
                "batch_size": batch,
                "seq_len": seq_len,
                "activation_mode": mode,
                "session_dir": session_dir,
            },
        )
        host, port = parse_server(server)
        backbone_config = cfg.backbone_config()
        side_config = cfg.side_config()
        backbone = build_backbone(backbone_config)
        dataset = dataset_from_config(cfg)
        nonce = generate_nonce(cfg.num_classes, cfg.nonce_seed, cfg.session_id)
        save_session(cfg.session_dir, backbone_config, side_config, nonce)

        pipeline = DevicePipeline(
            backbone,
            nonce,
            lambda: SocketTransport.connect(host, port, timeout=10.0),
            activation_mode=cfg.activation_mode,
            queue_depth=cfg.queue_depth,
            retry=RetryPolicy(cfg.retry_attempts, cfg.retry_base_delay, cfg.retry_factor),
        )

        def on_status(msg: MsgTrainStatus) -> None:
            status.emit("epoch", epoch=msg.epoch, loss=msg.mean_loss, steps=msg.step_count)

        result = pipeline.run_session(dataset, cfg.batch_size, side_config, on_status)
        save_session(
            cfg.session_dir, backbone_config, side_config, nonce, side_network=result.side_network
        )
        status.emit(
            "deployed",
            samples=len(dataset),
            forward_passes=result.forward_count,
            records=result.stats.records,
            bytes_sent=sum(result.bytes_sent.values()),
            session_dir=str(cfg.session_dir),
        )
    except HANDLED as e:
        raise fail(e)


@app.command("predict")
def predict_command(
    model_dir: Annotated[Path, typer.Option(envvar="PAE_SESSION_DIR", help="Device session directory")],
    input: Annotated[Path, typer.Option(help="label<TAB>text rows to classify")],
    format: Annotated[str, typer.Option(help="csv or table")] = "csv",
    batch: Annotated[int, typer.Option(help="Batch size")] = 8,
):
    """Fused predictions from the frozen backbone, the deployed side network and R."""
    try:
        report_format = parse_report_format(format)
        session = load_session(model_dir)
        bc = session.backbone_config
        dataset = ingest_delimited(
            input, bc.num_classes, bc.vocab_size, bc.seq_len, arch_kind=bc.arch_kind
        )
        rows = []
        for b in dataset.batches(batch):
            y_out = predict(session.backbone, session.side_network, session.nonce, b.tokens, b.pad_mask)
            labels = np.argmax(b.labels, axis=1)
            for sid, label, pred in zip(b.sample_ids, labels, classify(y_out)):
                rows.append(
                    {"row": sid, "label": int(label), "prediction": int(pred), "correct": bool(label == pred)}
                )
        typer.echo(report(("row", "label", "prediction", "correct"), rows, report_format), nl=False)
    except HANDLED as e:
        raise fail(e)


@app.command("simulate")
def simulate_command(
    config: ConfigOption = None,
    mode: Annotated[Optional[ActivationMode], typer.Option(help="Transmit pivot or full activations")] = None,
    seq_len: Annotated[Optional[int], typer.Option(help="Sequence length")] = None,
    epochs: Annotated[Optional[int], typer.Option(help="Epoch budget")] = None,
    samples: Annotated[Optional[int], typer.Option(help="Synthetic sample count")] = None,
    cache_dir: Annotated[Optional[Path], typer.Option(help="Keep the server cache here")] = None,
    format: Annotated[str, typer.Option(help="csv or table")] = "csv",
):
    """Device and server in one process over loopback; prints RunMetrics."""
    try:
        report_format = parse_report_format(format)
        cfg: RunConfig = load_config(
            config,
            {
                "activation_mode": mode,
                "seq_len": seq_len,
                "epochs": epochs,
                "dataset_size": samples,
            },
        )
        result = run_simulation(cfg, cache_dir=cache_dir, status=DefaultStatus())
        typer.echo(report(METRICS_COLUMNS, [metrics_row(result.metrics)], report_format), nl=False)
    except HANDLED as e:
        raise fail(e)


@app.command("report")
def report_command(
    model: Annotated[ReportModel, typer.Option(help="cost, time or leak")] = ReportModel.COST,
    sweep: Annotated[
        Optional[str], typer.Option(help="key=start..stop[:step] or key=a,b,c; keys: seq-len, batch, epochs, bandwidth")
    ] = None,
    method: Annotated[
        Optional[list[CostMethod]], typer.Option(help="Methods to include (repeatable); default all")
    ] = None,
    format: Annotated[str, typer.Option(help="csv or table")] = "csv",
    layers: Annotated[int, typer.Option(help="Backbone layers L")] = 24,
    hidden: Annotated[int, typer.Option(help="Hidden size H")] = 2048,
    seq_len: Annotated[int, typer.Option(help="Sequence length")] = 256,
    classes: Annotated[int, typer.Option(help="Classes C")] = 2,
    batch: Annotated[int, typer.Option(help="Batch size")] = 8,
    float_width: Annotated[int, typer.Option(help="Bytes per float")] = 2,
    epochs: Annotated[int, typer.Option(help="Epoch budget")] = 20,
    batches_per_epoch: Annotated[int, typer.Option(help="Batches per epoch")] = 1,
    bandwidth: Annotated[float, typer.Option(help="Link bandwidth in Mbit/s")] = 100.0,
    trials: Annotated[int, typer.Option(help="Trials for the leak model")] = 10_000,
):
    """Cost, time or label-leak tables for plotting."""
    try:
        report_format = parse_report_format(format)
        if model is ReportModel.LEAK:
            rows = leak_rows(classes, trials)
            typer.echo(report(LEAK_COLUMNS, rows, report_format), nl=False)
            return
        key, values = parse_sweep(sweep) if sweep else (None, [])
        base = CostModelInput(
            num_layers=layers,
            seq_len=seq_len,
            hidden_size=hidden,
            num_classes=classes,
            batch_size=batch,
            float_width=float_width,
            epochs=epochs,
            batches_per_epoch=batches_per_epoch,
        )
        methods = method or list(CostMethod)
        points = sweep_inputs(base, key, values, methods, bandwidth)
        if model is ReportModel.COST:
            rows = [cost_row(inp) for inp, _ in points]
            columns = COST_COLUMNS
        else:
            rows = [time_row(inp, bw) for inp, bw in points]
            columns = TIME_COLUMNS
        typer.echo(report(columns, rows, report_format), nl=False)
    except HANDLED as e:
        raise fail(e)


def main():
    app()


if __name__ == "__main__":
    main()
