from dataclasses import dataclass
from enum import Enum

from .errors import ConfigError


class ArchKind(Enum):
    """Backbone architecture family; decides the pivot token."""

    AUTOREGRESSIVE = "autoregressive"
    AUTOENCODING = "autoencoding"


class OptimizerKind(Enum):
    """Side-network optimizers."""

    SGD = "sgd"
    ADAM = "adam"


class Nonlinearity(Enum):
    """Elementwise activation used inside adapters."""

    RELU = "relu"
    GELU = "gelu"
    TANH = "tanh"


class ActivationMode(Enum):
    """What the device transmits per layer."""

    PIVOT = "pivot"
    FULL = "full"


class CostMethod(Enum):
    """Fine-tuning schemes covered by the cost model."""

    PAE = "pae"
    FULL_ACTIVATION_SIDE_TUNE = "full-activation"
    SPLIT_LEARNING = "split-learning"
    DEVICE_LOCAL = "device-local"


class ReportFormat(Enum):
    """Output formats for reports."""

    CSV = "csv"
    TABLE = "table"


PAD_TOKEN = 0
CLS_TOKEN = 1
RESERVED_TOKENS = 2


@dataclass(frozen=True)
class BackboneConfig:
    """Shape and seed of the frozen backbone.

    Attributes:
        num_layers: Transformer layer count L
        hidden_size: Hidden size H (the side network's d)
        num_heads: Attention heads; must divide hidden_size
        seq_len: Sequence length L_seq
        vocab_size: Vocabulary size, reserved ids included
        num_classes: Output classes C
        arch_kind: Autoregressive (causal, last token) or autoencoding ([CLS])
        init_seed: Seed for the synthesized weights
    """

    num_layers: int
    hidden_size: int
    num_heads: int
    seq_len: int
    vocab_size: int
    num_classes: int
    arch_kind: ArchKind = ArchKind.AUTOREGRESSIVE
    init_seed: int = 0

    def validate(self) -> None:
        for name in ("num_layers", "hidden_size", "num_heads", "seq_len", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}"
            )
        if self.vocab_size <= RESERVED_TOKENS:
            raise ConfigError(
                f"vocab_size must exceed the {RESERVED_TOKENS} reserved ids, got {self.vocab_size}"
            )
        if not 0 <= self.init_seed < 2**64:
            raise ConfigError(f"init_seed out of range: {self.init_seed}")


@dataclass(frozen=True)
class SideNetworkConfig:
    """Hyperparameters of the server-side adapter network.

    Attributes:
        num_layers: Adapter count; equals the backbone's layer count
        hidden_size: Adapter input/output width d
        bottleneck: Adapter rank r
        num_classes: Head output width C
        learning_rate: Optimizer step size
        optimizer: SGD or Adam
        adam_beta1: Adam first-moment decay
        adam_beta2: Adam second-moment decay
        adam_eps: Adam denominator floor
        init_seed: Seed for W_down initialization
        nonlinearity: Adapter activation σ
    """

    num_layers: int
    hidden_size: int
    bottleneck: int
    num_classes: int
    learning_rate: float = 5e-4
    optimizer: OptimizerKind = OptimizerKind.ADAM
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_seed: int = 0
    nonlinearity: Nonlinearity = Nonlinearity.RELU

    def validate(self) -> None:
        for name in ("num_layers", "hidden_size", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 1 <= self.bottleneck <= self.hidden_size:
            raise ConfigError(
                f"bottleneck must be in [1, {self.hidden_size}], got {self.bottleneck}"
            )
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("Adam coefficients out of range")


# Single-byte wire codes shared by the frame codec and the binary file layouts.
ARCH_CODES = {ArchKind.AUTOREGRESSIVE: 0, ArchKind.AUTOENCODING: 1}
OPTIMIZER_CODES = {OptimizerKind.SGD: 0, OptimizerKind.ADAM: 1}
NONLINEARITY_CODES = {Nonlinearity.RELU: 0, Nonlinearity.GELU: 1, Nonlinearity.TANH: 2}


def decode_code(codes: dict, value: int, what: str):
    """Inverse lookup of a wire code; unknown codes raise ValueError."""
    for member, code in codes.items():
        if code == value:
            return member
    raise ValueError(f"unknown {what} code {value}")
