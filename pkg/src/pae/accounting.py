"""Closed-form communication, computation and time models, plus run metrics.

Byte counts are exact integers; megabytes are decimal (10**6 bytes). Device
FLOPs use the 2·params·tokens forward estimate, 6·params·tokens when the
device also trains.
"""

import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional, Sequence

from .errors import UsageError
from .formatters import get_formatter
from .model import CostMethod, ReportFormat
from .privacy import measure_sign_leak

MB = 10**6
PIPELINED = (CostMethod.PAE, CostMethod.FULL_ACTIVATION_SIDE_TUNE)


@dataclass(frozen=True)
class CostModelInput:
    """Shape of one fine-tuning run for the cost models.

    Attributes:
        num_layers: Backbone layers L
        seq_len: Sequence length L_seq
        hidden_size: Hidden size H
        num_classes: Classes C
        batch_size: Batch size B
        float_width: Bytes per transmitted float
        epochs: Epoch budget E
        batches_per_epoch: Batches per epoch N_b
        method: Fine-tuning scheme
        backbone_params: Backbone parameter count; 12·L·H² when not given
        bottleneck: Side-network adapter rank r, for server compute
    """

    num_layers: int
    seq_len: int
    hidden_size: int
    num_classes: int
    batch_size: int
    float_width: int = 2
    epochs: int = 20
    batches_per_epoch: int = 1
    method: CostMethod = CostMethod.PAE
    backbone_params: Optional[int] = None
    bottleneck: int = 64

    def validate(self) -> None:
        for name in (
            "num_layers",
            "seq_len",
            "hidden_size",
            "num_classes",
            "batch_size",
            "float_width",
            "epochs",
            "batches_per_epoch",
            "bottleneck",
        ):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def params(self) -> int:
        if self.backbone_params is not None:
            return self.backbone_params
        return 12 * self.num_layers * self.hidden_size**2

    @property
    def side_params(self) -> int:
        d, r, c = self.hidden_size, self.bottleneck, self.num_classes
        return self.num_layers * (1 + 2 * d * r) + d * c + c

    @property
    def tokens_per_batch(self) -> int:
        return self.batch_size * self.seq_len


@dataclass(frozen=True)
class CommCost:
    per_batch: int
    per_epoch: int
    total: int


@dataclass(frozen=True)
class CompCost:
    per_epoch_flops: int
    total_flops: int


@dataclass(frozen=True)
class BatchTime:
    """Seconds per batch: communication, device compute, server compute, combined."""

    comm: float
    device: float
    server: float
    total: float


def comm_cost(inp: CostModelInput) -> CommCost:
    """Device-server bytes per batch, per epoch and over the whole run."""
    inp.validate()
    b, s, h, layers, w = (
        inp.batch_size,
        inp.seq_len,
        inp.hidden_size,
        inp.num_layers,
        inp.float_width,
    )
    if inp.method is CostMethod.PAE:
        per_batch = b * (layers * h + inp.num_classes) * w
    elif inp.method is CostMethod.FULL_ACTIVATION_SIDE_TUNE:
        per_batch = b * s * h * layers * w
    elif inp.method is CostMethod.SPLIT_LEARNING:
        # activations and gradients across both cuts of the U-shape
        per_batch = 2 * 2 * b * s * h * w
    else:
        per_batch = 0
    per_epoch = per_batch * inp.batches_per_epoch
    total = per_epoch if inp.method is CostMethod.PAE else per_epoch * inp.epochs
    return CommCost(per_batch=per_batch, per_epoch=per_epoch, total=total)


def device_flops_per_batch(inp: CostModelInput) -> int:
    factor = 6 if inp.method is CostMethod.DEVICE_LOCAL else 2
    return factor * inp.params * inp.tokens_per_batch


def comp_cost(inp: CostModelInput) -> CompCost:
    """Device FLOPs; with PAE the device only works in epoch 1."""
    inp.validate()
    per_epoch = device_flops_per_batch(inp) * inp.batches_per_epoch
    total = per_epoch if inp.method is CostMethod.PAE else per_epoch * inp.epochs
    return CompCost(per_epoch_flops=per_epoch, total_flops=total)


def server_flops_per_batch(inp: CostModelInput) -> int:
    if inp.method is CostMethod.PAE:
        return 6 * inp.side_params * inp.batch_size
    if inp.method is CostMethod.FULL_ACTIVATION_SIDE_TUNE:
        return 6 * inp.side_params * inp.tokens_per_batch
    if inp.method is CostMethod.SPLIT_LEARNING:
        return 6 * inp.params * inp.tokens_per_batch
    return 0


def batch_time(
    inp: CostModelInput,
    bandwidth_mbps: float,
    device_flops_per_s: float = 1e12,
    server_flops_per_s: float = 1e14,
) -> BatchTime:
    """Per-batch time: split learning runs its stages in sequence, side tuning overlaps them."""
    if bandwidth_mbps <= 0 or device_flops_per_s <= 0 or server_flops_per_s <= 0:
        raise UsageError("bandwidth and compute rates must be positive")
    comm = comm_cost(inp).per_batch * 8 / (bandwidth_mbps * 1e6)
    device = device_flops_per_batch(inp) / device_flops_per_s
    server = server_flops_per_batch(inp) / server_flops_per_s
    if inp.method is CostMethod.SPLIT_LEARNING:
        total = comm + device + server
    elif inp.method in PIPELINED:
        total = max(comm, device, server)
    else:
        total = device
    return BatchTime(comm=comm, device=device, server=server, total=total)


@dataclass
class RunMetrics:
    """Counters and timings of one simulated session.

    ``overhead_bytes`` is everything the device sent that is not activation
    or Δy float payload: frame envelopes, record headers, sample ids and
    control messages.
    """

    mode: str
    seq_len: int
    batch_size: int
    samples: int
    records: int
    bytes_sent: int
    bytes_received: int
    activation_bytes: int
    delta_bytes: int
    overhead_bytes: int
    forward_count: int
    step_count: int
    epoch_losses: list[float] = field(default_factory=list)
    phase_seconds: dict[str, float] = field(default_factory=dict)
    frozen_accuracy: float = 0.0
    fused_accuracy: float = 0.0
    retries: int = 0

    @property
    def payload_bytes(self) -> int:
        return self.activation_bytes + self.delta_bytes

    @property
    def payload_bytes_per_batch(self) -> float:
        return self.payload_bytes / self.records if self.records else 0.0


METRICS_COLUMNS = (
    "mode",
    "seq_len",
    "batch_size",
    "samples",
    "records",
    "bytes_sent",
    "bytes_received",
    "activation_bytes",
    "delta_bytes",
    "overhead_bytes",
    "forward_count",
    "step_count",
    "epochs",
    "final_loss",
    "frozen_accuracy",
    "fused_accuracy",
    "epoch1_seconds",
    "server_only_seconds",
    "total_seconds",
)

COST_COLUMNS = (
    "method",
    "seq_len",
    "batch",
    "epochs",
    "float_width",
    "per_batch_bytes",
    "per_batch_mb",
    "per_epoch_bytes",
    "total_bytes",
    "per_epoch_flops",
    "total_flops",
)

TIME_COLUMNS = (
    "method",
    "seq_len",
    "batch",
    "bandwidth_mbps",
    "comm_s",
    "device_s",
    "server_s",
    "batch_s",
)

LEAK_COLUMNS = ("classes", "trials", "masked", "recovery_rate")


def metrics_row(metrics: RunMetrics) -> dict[str, Any]:
    return {
        "mode": metrics.mode,
        "seq_len": metrics.seq_len,
        "batch_size": metrics.batch_size,
        "samples": metrics.samples,
        "records": metrics.records,
        "bytes_sent": metrics.bytes_sent,
        "bytes_received": metrics.bytes_received,
        "activation_bytes": metrics.activation_bytes,
        "delta_bytes": metrics.delta_bytes,
        "overhead_bytes": metrics.overhead_bytes,
        "forward_count": metrics.forward_count,
        "step_count": metrics.step_count,
        "epochs": len(metrics.epoch_losses),
        "final_loss": metrics.epoch_losses[-1] if metrics.epoch_losses else float("nan"),
        "frozen_accuracy": metrics.frozen_accuracy,
        "fused_accuracy": metrics.fused_accuracy,
        "epoch1_seconds": metrics.phase_seconds.get("epoch1", 0.0),
        "server_only_seconds": metrics.phase_seconds.get("server_only", 0.0),
        "total_seconds": metrics.phase_seconds.get("total", 0.0),
    }


def cost_row(inp: CostModelInput) -> dict[str, Any]:
    comm = comm_cost(inp)
    comp = comp_cost(inp)
    return {
        "method": inp.method.value,
        "seq_len": inp.seq_len,
        "batch": inp.batch_size,
        "epochs": inp.epochs,
        "float_width": inp.float_width,
        "per_batch_bytes": comm.per_batch,
        "per_batch_mb": comm.per_batch / MB,
        "per_epoch_bytes": comm.per_epoch,
        "total_bytes": comm.total,
        "per_epoch_flops": comp.per_epoch_flops,
        "total_flops": comp.total_flops,
    }


def time_row(inp: CostModelInput, bandwidth_mbps: float) -> dict[str, Any]:
    t = batch_time(inp, bandwidth_mbps)
    return {
        "method": inp.method.value,
        "seq_len": inp.seq_len,
        "batch": inp.batch_size,
        "bandwidth_mbps": bandwidth_mbps,
        "comm_s": t.comm,
        "device_s": t.device,
        "server_s": t.server,
        "batch_s": t.total,
    }


def leak_rows(num_classes: int, trials: int, seed: int = 0) -> list[dict[str, Any]]:
    return [
        {
            "classes": num_classes,
            "trials": trials,
            "masked": masked,
            "recovery_rate": measure_sign_leak(trials, num_classes, seed, masked),
        }
        for masked in (False, True)
    ]


SWEEP_KEYS = {"seq-len", "batch", "epochs", "bandwidth"}
_RANGE = re.compile(r"^(?P<start>.+?)\.\.(?P<stop>[^:]+)(?::(?P<step>.+))?$")


def _number(text: str) -> float:
    try:
        return float(text)
    except ValueError as e:
        raise UsageError(f"not a number: {text!r}") from e


def parse_sweep(sweep: str) -> tuple[str, list[float]]:
    """``key=start..stop`` doubles, ``key=start..stop:step`` adds, ``key=a,b,c`` lists.

    Raises:
        UsageError: For an unknown key or a malformed range
    """
    key, sep, body = sweep.partition("=")
    key = key.strip()
    if not sep or key not in SWEEP_KEYS:
        raise UsageError(f"sweep must be key=values with key in {sorted(SWEEP_KEYS)}: {sweep!r}")
    body = body.strip()
    match = _RANGE.match(body)
    if match is None:
        values = [_number(v) for v in body.split(",") if v.strip()]
        if not values:
            raise UsageError(f"empty sweep: {sweep!r}")
        return key, values
    start, stop = _number(match["start"]), _number(match["stop"])
    if start <= 0 or stop < start:
        raise UsageError(f"sweep range must satisfy 0 < start <= stop: {sweep!r}")
    values = []
    value = start
    if match["step"] is None:
        while value <= stop:
            values.append(value)
            value *= 2
    else:
        step = _number(match["step"])
        if step <= 0:
            raise UsageError(f"sweep step must be positive: {sweep!r}")
        while value <= stop + 1e-9 * step:
            values.append(value)
            value += step
    return key, values


def sweep_inputs(
    base: CostModelInput,
    key: Optional[str],
    values: Sequence[float],
    methods: Iterable[CostMethod],
    bandwidth_mbps: float,
) -> list[tuple[CostModelInput, float]]:
    """One (input, bandwidth) pair per method and sweep value."""
    points: list[tuple[CostModelInput, float]] = []
    for method in methods:
        for value in values if key else [None]:
            inp = replace(base, method=method)
            bandwidth = bandwidth_mbps
            if key == "seq-len":
                inp = replace(inp, seq_len=int(value))  # type: ignore[arg-type]
            elif key == "batch":
                inp = replace(inp, batch_size=int(value))  # type: ignore[arg-type]
            elif key == "epochs":
                inp = replace(inp, epochs=int(value))  # type: ignore[arg-type]
            elif key == "bandwidth":
                bandwidth = float(value)  # type: ignore[arg-type]
            points.append((inp, bandwidth))
    return points


def report(
    columns: Sequence[str],
    rows: Sequence[Mapping[str, Any]],
    report_format: ReportFormat = ReportFormat.CSV,
) -> str:
    """Render rows with a stable column order."""
    return get_formatter(report_format).format(columns, rows)
