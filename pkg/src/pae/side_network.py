"""Server-side trainable network: gated cascaded adapters plus a linear head.

Layer i mixes the backbone's pivot activation A_i with the previous adapter's
output through a sigmoid gate, then applies a bottleneck residual adapter::

    S_in_i = (1 - sigmoid(alpha_i)) * A_i + sigmoid(alpha_i) * h_{i-1}
    h_i    = S_in_i + sigma(S_in_i @ W_down_i) @ W_up_i

with h_0 := A_1. The head maps h_L to y_side = h_L @ head_w + head_b, trained
with mean squared error against the masked delta target.
"""

import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, ProtocolError, UsageError
from .model import (
    NONLINEARITY_CODES,
    OPTIMIZER_CODES,
    Nonlinearity,
    OptimizerKind,
    SideNetworkConfig,
    decode_code,
)
from .numerics import (
    SeededRng,
    Tensor,
    matmul,
    nonlinearity,
    nonlinearity_grad,
    ordered_sum,
    sigmoid,
)

SIDE_MAGIC = b"PAES"
SIDE_VERSION = 1
_SIDE_CONFIG_STRUCT = struct.Struct("<IIIIBBddddQ")

PARAMETER_NAMES = ("alpha", "w_down", "w_up", "head_w", "head_b")


@dataclass
class SideParameters:
    """Parameter-shaped arrays; used for the network itself, gradients and moments.

    Attributes:
        alpha: Gate scalars, shape [L]
        w_down: Down projections, shape [L, d, r]
        w_up: Up projections, shape [L, r, d]
        head_w: Head weight, shape [d, C]
        head_b: Head bias, shape [C]
    """

    alpha: Tensor
    w_down: Tensor
    w_up: Tensor
    head_w: Tensor
    head_b: Tensor

    def arrays(self) -> Iterator[Tensor]:
        for name in PARAMETER_NAMES:
            yield getattr(self, name)

    def zeros_like(self) -> "SideParameters":
        return SideParameters(*(np.zeros_like(a) for a in self.arrays()))

    def copy(self) -> "SideParameters":
        return SideParameters(*(a.copy() for a in self.arrays()))


Gradients = SideParameters


@dataclass
class SideNetwork:
    """Trainable side network; mutated in place by ``optimizer_step``.

    ``version`` increments on every update so a forward state can be matched
    to the parameters it was computed with.
    """

    config: SideNetworkConfig
    params: SideParameters
    version: int = 0

    @property
    def alpha(self) -> Tensor:
        return self.params.alpha

    @property
    def w_down(self) -> Tensor:
        return self.params.w_down

    @property
    def w_up(self) -> Tensor:
        return self.params.w_up

    @property
    def head_w(self) -> Tensor:
        return self.params.head_w

    @property
    def head_b(self) -> Tensor:
        return self.params.head_b

    def copy(self) -> "SideNetwork":
        return SideNetwork(self.config, self.params.copy(), self.version)


@dataclass
class _LayerState:
    h_prev: Tensor
    activation: Tensor
    s_in: Tensor
    pre: Tensor
    act: Tensor


@dataclass
class SideForwardState:
    """Intermediates of one forward pass, consumed by the matching backward."""

    layers: list[_LayerState]
    h_out: Tensor
    net_version: int
    consumed: bool = False


@dataclass
class OptimizerState:
    """Optimizer step counter and moment estimates (Adam only)."""

    step: int = 0
    first_moment: Optional[SideParameters] = None
    second_moment: Optional[SideParameters] = None


def parameter_count(config: SideNetworkConfig) -> int:
    """L·(1 + 2·d·r) + d·C + C."""
    d, r, c = config.hidden_size, config.bottleneck, config.num_classes
    return config.num_layers * (1 + 2 * d * r) + d * c + c


def init_side_network(
    config: SideNetworkConfig, head_bias: Optional[Tensor] = None
) -> SideNetwork:
    """Build a side network: alpha = 0, W_down and head_w uniform(±1/sqrt(d)), W_up = 0.

    Args:
        config: Network hyperparameters
        head_bias: Optional initial head bias (defaults to zeros)
    """
    config.validate()
    d, r, c = config.hidden_size, config.bottleneck, config.num_classes
    bound = 1.0 / math.sqrt(d)
    rng = SeededRng(config.init_seed)
    w_down = np.stack([rng.uniform(-bound, bound, (d, r)) for _ in range(config.num_layers)])
    head_w = rng.uniform(-bound, bound, (d, c))
    if head_bias is None:
        head_b = np.zeros(c)
    else:
        head_b = np.array(head_bias, dtype=np.float64).reshape(c)
    params = SideParameters(
        alpha=np.zeros(config.num_layers),
        w_down=w_down,
        w_up=np.zeros((config.num_layers, r, d)),
        head_w=head_w,
        head_b=head_b,
    )
    return SideNetwork(config, params)


def gate_mix(a_i: Tensor, h_prev: Tensor, alpha_i: float) -> Tensor:
    """(1 - mu)·A_i + mu·h_prev with mu = sigmoid(alpha_i)."""
    if a_i.shape != h_prev.shape:
        raise DimensionError(f"gate inputs differ in shape: {a_i.shape} vs {h_prev.shape}")
    mu = sigmoid(float(alpha_i))
    return (1.0 - mu) * a_i + mu * h_prev


def adapter_forward(
    s_in: Tensor,
    w_down: Tensor,
    w_up: Tensor,
    kind: Nonlinearity = Nonlinearity.RELU,
) -> Tensor:
    """Bottleneck residual adapter: S_in + σ(S_in·W_down)·W_up."""
    if w_down.shape[0] != s_in.shape[-1] or w_up.shape != (w_down.shape[1], s_in.shape[-1]):
        raise DimensionError(
            f"adapter shapes inconsistent: S_in {s_in.shape}, W_down {w_down.shape}, W_up {w_up.shape}"
        )
    return s_in + matmul(nonlinearity(matmul(s_in, w_down), kind), w_up)


def _check_activations(net: SideNetwork, activations: Sequence[Tensor]) -> None:
    config = net.config
    if len(activations) != config.num_layers:
        raise ProtocolError(
            f"expected {config.num_layers} activation blocks, got {len(activations)}"
        )
    first = np.shape(activations[0])
    for a in activations:
        if np.ndim(a) != 2 or np.shape(a) != first or first[1] != config.hidden_size:
            raise DimensionError(
                f"activation blocks must all be [B, {config.hidden_size}], got {np.shape(a)}"
            )


def side_forward(
    net: SideNetwork, activations: Sequence[Tensor]
) -> tuple[Tensor, SideForwardState]:
    """Run the adapter chain over L pivot activations [B, d] and apply the head."""
    _check_activations(net, activations)
    kind = net.config.nonlinearity
    layers = []
    h = np.asarray(activations[0], dtype=np.float64)
    for i in range(net.config.num_layers):
        a_i = np.asarray(activations[i], dtype=np.float64)
        s_in = gate_mix(a_i, h, float(net.alpha[i]))
        pre = matmul(s_in, net.w_down[i])
        act = nonlinearity(pre, kind)
        layers.append(_LayerState(h_prev=h, activation=a_i, s_in=s_in, pre=pre, act=act))
        h = s_in + matmul(act, net.w_up[i])
    y_side = matmul(h, net.head_w) + net.head_b
    return y_side, SideForwardState(layers=layers, h_out=h, net_version=net.version)


def side_loss(y_side: Tensor, delta_y: Tensor) -> float:
    """Mean squared error (1/(B·C))·Σ(y_side - Δy)²."""
    if np.shape(y_side) != np.shape(delta_y):
        raise DimensionError(f"y_side {np.shape(y_side)} vs delta_y {np.shape(delta_y)}")
    diff = np.asarray(y_side, dtype=np.float64) - np.asarray(delta_y, dtype=np.float64)
    return float(ordered_sum((diff * diff).ravel())) / diff.size


def side_backward(
    net: SideNetwork, state: SideForwardState, y_side: Tensor, delta_y: Tensor
) -> Gradients:
    """Exact gradients of ``side_loss`` with respect to every parameter."""
    if state is None or state.consumed:
        raise UsageError("side_backward needs a fresh state from side_forward")
    if state.net_version != net.version:
        raise UsageError("forward state was computed with different parameters")
    if np.shape(y_side) != np.shape(delta_y):
        raise DimensionError(f"y_side {np.shape(y_side)} vs delta_y {np.shape(delta_y)}")
    state.consumed = True
    kind = net.config.nonlinearity
    grads = net.params.zeros_like()

    dy = (2.0 / np.size(y_side)) * (np.asarray(y_side) - np.asarray(delta_y))
    grads.head_w = matmul(state.h_out.T, dy)
    grads.head_b = ordered_sum(dy, axis=0)
    dh = matmul(dy, net.head_w.T)

    for i in reversed(range(net.config.num_layers)):
        layer = state.layers[i]
        grads.w_up[i] = matmul(layer.act.T, dh)
        d_pre = matmul(dh, net.w_up[i].T) * nonlinearity_grad(layer.pre, kind)
        grads.w_down[i] = matmul(layer.s_in.T, d_pre)
        ds = dh + matmul(d_pre, net.w_down[i].T)

        mu = sigmoid(float(net.alpha[i]))
        grads.alpha[i] = mu * (1.0 - mu) * float(
            ordered_sum((ds * (layer.h_prev - layer.activation)).ravel())
        )
        # Layer 1's h_prev is A_1 itself, not a parameter path.
        dh = mu * ds
    return grads


def init_optimizer_state(net: SideNetwork) -> OptimizerState:
    if net.config.optimizer is OptimizerKind.ADAM:
        return OptimizerState(
            step=0,
            first_moment=net.params.zeros_like(),
            second_moment=net.params.zeros_like(),
        )
    return OptimizerState(step=0)


def optimizer_step(
    net: SideNetwork,
    grads: Gradients,
    opt_state: OptimizerState,
    lr: Optional[float] = None,
) -> tuple[SideNetwork, OptimizerState]:
    """Apply one SGD or Adam update in place.

    ``lr`` overrides the configured learning rate for this step only.
    """
    config = net.config
    if lr is None:
        lr = config.learning_rate
    opt_state.step += 1
    if config.optimizer is OptimizerKind.SGD:
        for p, g in zip(net.params.arrays(), grads.arrays()):
            p -= lr * g
    else:
        if opt_state.first_moment is None or opt_state.second_moment is None:
            raise UsageError("Adam state has no moment buffers")
        b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
        c1 = 1.0 - b1**opt_state.step
        c2 = 1.0 - b2**opt_state.step
        for p, g, m, v in zip(
            net.params.arrays(),
            grads.arrays(),
            opt_state.first_moment.arrays(),
            opt_state.second_moment.arrays(),
        ):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    net.version += 1
    return net, opt_state


def serialize_side_network(net: SideNetwork) -> bytes:
    """PAES layout: magic, version, config block, float32 parameters, CRC32."""
    c = net.config
    body = bytearray(SIDE_MAGIC)
    body.append(SIDE_VERSION)
    body += _SIDE_CONFIG_STRUCT.pack(
        c.num_layers,
        c.hidden_size,
        c.bottleneck,
        c.num_classes,
        OPTIMIZER_CODES[c.optimizer],
        NONLINEARITY_CODES[c.nonlinearity],
        c.learning_rate,
        c.adam_beta1,
        c.adam_beta2,
        c.adam_eps,
        c.init_seed,
    )
    for i in range(c.num_layers):
        body += struct.pack("<f", float(net.alpha[i]))
        body += net.w_down[i].astype("<f4").tobytes()
        body += net.w_up[i].astype("<f4").tobytes()
    body += net.head_w.astype("<f4").tobytes()
    body += net.head_b.astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    return bytes(body)


def deserialize_side_network(blob: bytes) -> SideNetwork:
    header_len = len(SIDE_MAGIC) + 1 + _SIDE_CONFIG_STRUCT.size
    if len(blob) < header_len + 4 or blob[:4] != SIDE_MAGIC:
        raise ConfigError("not a PAES side-network blob")
    if blob[4] != SIDE_VERSION:
        raise ConfigError(f"unsupported side-network version {blob[4]}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise ConfigError("side-network checksum mismatch")
    (
        layers,
        hidden,
        bottleneck,
        classes,
        opt_code,
        nl_code,
        lr,
        beta1,
        beta2,
        eps,
        seed,
    ) = _SIDE_CONFIG_STRUCT.unpack_from(blob, 5)
    try:
        config = SideNetworkConfig(
            num_layers=layers,
            hidden_size=hidden,
            bottleneck=bottleneck,
            num_classes=classes,
            learning_rate=lr,
            optimizer=decode_code(OPTIMIZER_CODES, opt_code, "optimizer"),
            adam_beta1=beta1,
            adam_beta2=beta2,
            adam_eps=eps,
            init_seed=seed,
            nonlinearity=decode_code(NONLINEARITY_CODES, nl_code, "nonlinearity"),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    config.validate()

    expected = parameter_count(config)
    if len(blob) - header_len - 4 != 4 * expected:
        raise ConfigError(f"side-network blob holds the wrong parameter count (want {expected})")
    floats = np.frombuffer(blob, dtype="<f4", offset=header_len, count=expected).astype(np.float64)

    d, r, c = hidden, bottleneck, classes
    alpha = np.zeros(layers)
    w_down = np.zeros((layers, d, r))
    w_up = np.zeros((layers, r, d))
    offset = 0
    for i in range(layers):
        alpha[i] = floats[offset]
        offset += 1
        w_down[i] = floats[offset : offset + d * r].reshape(d, r)
        offset += d * r
        w_up[i] = floats[offset : offset + r * d].reshape(r, d)
        offset += r * d
    head_w = floats[offset : offset + d * c].reshape(d, c).copy()
    offset += d * c
    head_b = floats[offset : offset + c].copy()
    return SideNetwork(config, SideParameters(alpha, w_down, w_up, head_w, head_b))


def quantize_side_network(net: SideNetwork) -> SideNetwork:
    """The float32 snapshot that deployment actually ships."""
    return deserialize_side_network(serialize_side_network(net))


@dataclass
class TrainStepResult:
    """Loss before the update and the gradients that were applied."""

    loss: float
    grads: Gradients = field(repr=False)


def train_step(
    net: SideNetwork,
    opt_state: OptimizerState,
    activations: Sequence[Tensor],
    delta_y: Tensor,
    lr: Optional[float] = None,
) -> TrainStepResult:
    """Forward, MSE against Δy, backward and one optimizer step."""
    y_side, state = side_forward(net, activations)
    loss = side_loss(y_side, delta_y)
    grads = side_backward(net, state, y_side, delta_y)
    optimizer_step(net, grads, opt_state, lr)
    return TrainStepResult(loss=loss, grads=grads)
