"""Run configuration: a flat ``key = value`` file validated into a pydantic model.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Keys may use ``-`` or ``_``. Every key is a field of ``RunConfig``.
"""

from pathlib import Path
from typing import Any, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError
from .model import (
    ActivationMode,
    ArchKind,
    BackboneConfig,
    Nonlinearity,
    OptimizerKind,
    SideNetworkConfig,
)


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines into a dict of raw strings.

    Raises:
        ConfigError: For a line without ``=``, an empty key or a repeated key
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


class RunConfig(BaseModel):
    """Everything a device, server or simulation run needs.

    Defaults describe the desk-scale acceptance run.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # backbone
    num_layers: int = Field(4, ge=1, description="Backbone layers L")
    hidden_size: int = Field(64, ge=1, description="Hidden size H")
    num_heads: int = Field(2, ge=1, description="Attention heads")
    seq_len: int = Field(8, ge=1, description="Sequence length L_seq")
    vocab_size: int = Field(16, ge=3, description="Vocabulary size, reserved ids included")
    num_classes: int = Field(2, ge=1, description="Output classes C")
    arch_kind: ArchKind = Field(ArchKind.AUTOREGRESSIVE, description="Pivot rule family")
    backbone_seed: int = Field(0, ge=0, lt=2**64, description="Backbone weight seed")

    # side network
    bottleneck: int = Field(16, ge=1, description="Adapter rank r")
    learning_rate: float = Field(
        2e-3,
        gt=0,
        description=(
            "Epoch-1 optimizer step size; the desk-scale run pairs 2e-3 with lr_decay 0.8 "
            "so later epochs settle instead of oscillating"
        ),
    )
    optimizer: OptimizerKind = Field(OptimizerKind.ADAM, description="sgd or adam")
    adam_beta1: float = Field(0.9, ge=0, lt=1, description="Adam first-moment decay")
    adam_beta2: float = Field(0.999, ge=0, lt=1, description="Adam second-moment decay")
    adam_eps: float = Field(1e-8, gt=0, description="Adam denominator floor")
    side_seed: int = Field(0, ge=0, lt=2**64, description="Side-network init seed")
    nonlinearity: Nonlinearity = Field(Nonlinearity.RELU, description="Adapter activation")

    # data and session
    data: str = Field("synthetic", description="'synthetic' or a label<TAB>text file")
    dataset_size: int = Field(2048, ge=0, description="Synthetic sample count")
    data_seed: int = Field(0, ge=0, lt=2**64, description="Synthetic data seed")
    batch_size: int = Field(8, ge=1, description="Batch size B")
    session_id: int = Field(1, ge=0, lt=2**64, description="Session id")
    nonce_seed: int = Field(0, ge=0, lt=2**64, description="Seed of the secret R")
    activation_mode: ActivationMode = Field(ActivationMode.PIVOT, description="pivot or full")
    queue_depth: int = Field(4, ge=1, description="Device outbound queue bound")
    session_dir: Path = Field(Path("pae-session"), description="Device session directory")

    # server
    epochs: int = Field(20, ge=1, description="Epoch budget E, epoch 1 included")
    tol: float = Field(1e-5, ge=0, description="Convergence tolerance on epoch-mean loss")
    patience: int = Field(3, ge=1, description="Stalled epochs before stopping")
    lr_decay: float = Field(
        0.8, gt=0, le=1, description="Per-epoch learning-rate factor applied by the server"
    )
    shuffle_seed: int = Field(0, ge=0, lt=2**64, description="Cached-epoch shuffle seed")
    multi_session: bool = Field(False, description="Allow several live sessions")
    cache_dir: Path = Field(Path("pae-cache"), description="Server cache directory")
    host: str = Field("127.0.0.1", description="Server host")
    port: int = Field(7431, ge=0, le=65535, description="Server TCP port")

    # transport
    retry_attempts: int = Field(5, ge=1, description="Transport attempts per message")
    retry_base_delay: float = Field(0.05, ge=0, description="First backoff delay in seconds")
    retry_factor: float = Field(2.0, ge=1, description="Backoff growth factor")

    def backbone_config(self) -> BackboneConfig:
        config = BackboneConfig(
            num_layers=self.num_layers,
            hidden_size=self.hidden_size,
            num_heads=self.num_heads,
            seq_len=self.seq_len,
            vocab_size=self.vocab_size,
            num_classes=self.num_classes,
            arch_kind=self.arch_kind,
            init_seed=self.backbone_seed,
        )
        config.validate()
        return config

    def side_config(self) -> SideNetworkConfig:
        config = SideNetworkConfig(
            num_layers=self.num_layers,
            hidden_size=self.hidden_size,
            bottleneck=self.bottleneck,
            num_classes=self.num_classes,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            init_seed=self.side_seed,
            nonlinearity=self.nonlinearity,
        )
        config.validate()
        return config


def _normalize(values: Mapping[str, Any]) -> dict[str, Any]:
    return {key.replace("-", "_"): value for key, value in values.items()}


def build_config(
    values: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Validate raw values, with non-None ``overrides`` taking precedence.

    Raises:
        ConfigError: Naming each offending key
    """
    merged = _normalize(values)
    if overrides:
        merged.update({k: v for k, v in _normalize(overrides).items() if v is not None})
    try:
        return RunConfig(**merged)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from e


def load_config(
    path: Optional[Path], overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Read ``path`` (if given) and apply ``overrides``.

    Unknown keys are reported with their line number.
    """
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        values = parse_flat(text, source=str(path))
        known = set(RunConfig.model_fields)
        lines = {
            line.split("=", 1)[0].strip(): n
            for n, line in enumerate(text.splitlines(), start=1)
            if "=" in line.split("#", 1)[0]
        }
        for key in values:
            if key.replace("-", "_") not in known:
                raise ConfigError(f"{path}:{lines.get(key, 0)}: unknown key {key!r}")
    return build_config(values, overrides)
