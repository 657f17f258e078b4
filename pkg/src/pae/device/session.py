"""Device-local session directory and fused prediction.

Layout::

    session.conf        flat key = value: backbone and side-network configs
    nonce.secret        PAEK header + float64 R values + CRC32, mode 0600
    side_network.paes   deployed side network, once received
    backbone.paew       optional exported backbone weights
"""

import os
import struct
import zlib
from dataclasses import dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from ..backbone import (
    BackboneModel,
    build_backbone,
    forward,
    load_weights,
    pivot_activations,
    save_weights,
)
from ..config import parse_flat
from ..errors import ConfigError, UsageError
from ..model import BackboneConfig, SideNetworkConfig
from ..numerics import Tensor
from ..privacy import NonceKey, fuse_output
from ..side_network import (
    SideNetwork,
    deserialize_side_network,
    serialize_side_network,
    side_forward,
)

SESSION_CONF = "session.conf"
NONCE_FILE = "nonce.secret"
SIDE_FILE = "side_network.paes"
BACKBONE_FILE = "backbone.paew"

NONCE_MAGIC = b"PAEK"
NONCE_VERSION = 1
_NONCE_HEADER = struct.Struct("<4sBQQI")


@dataclass
class DeviceSession:
    backbone_config: BackboneConfig
    side_config: SideNetworkConfig
    nonce: NonceKey
    backbone: BackboneModel
    side_network: Optional[SideNetwork] = None


def encode_nonce(nonce: NonceKey) -> bytes:
    values = np.asarray(nonce.values, dtype="<f8")
    body = (
        _NONCE_HEADER.pack(
            NONCE_MAGIC, NONCE_VERSION, nonce.session_id, nonce.rng_seed, values.size
        )
        + values.tobytes()
    )
    return body + struct.pack("<I", zlib.crc32(body))


def decode_nonce(data: bytes) -> NonceKey:
    if len(data) < _NONCE_HEADER.size + 4:
        raise ConfigError("nonce file is truncated")
    magic, version, session_id, seed, count = _NONCE_HEADER.unpack_from(data, 0)
    if magic != NONCE_MAGIC or version != NONCE_VERSION:
        raise ConfigError("not a nonce file")
    if len(data) != _NONCE_HEADER.size + 8 * count + 4:
        raise ConfigError("nonce file has the wrong length")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ConfigError("nonce file checksum mismatch")
    values = np.frombuffer(data, "<f8", count, _NONCE_HEADER.size).astype(np.float64)
    values.flags.writeable = False
    return NonceKey(values=values, session_id=session_id, rng_seed=seed)


def _conf_lines(prefix: str, config: object) -> list[str]:
    lines = []
    for f in fields(config):  # type: ignore[arg-type]
        value = getattr(config, f.name)
        if isinstance(value, Enum):
            value = value.value
        text = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{prefix}.{f.name} = {text}")
    return lines


def _conf_value(kind: type, raw: str) -> object:
    if issubclass(kind, Enum):
        return kind(raw)
    if kind is float:
        return float(raw)
    return int(raw)


def _read_conf(values: dict[str, str], prefix: str, cls: type) -> object:
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key in values:
            try:
                kwargs[f.name] = _conf_value(f.type, values[key])  # type: ignore[arg-type]
            except ValueError as e:
                raise ConfigError(f"{SESSION_CONF}: {key}: {e}") from e
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{SESSION_CONF}: invalid {prefix} section: {e}") from e


def save_session(
    directory: Path,
    backbone_config: BackboneConfig,
    side_config: SideNetworkConfig,
    nonce: NonceKey,
    *,
    side_network: Optional[SideNetwork] = None,
    backbone: Optional[BackboneModel] = None,
) -> None:
    """Write the session directory; the nonce file is readable by the owner only."""
    directory.mkdir(parents=True, exist_ok=True)
    conf = [f"session_id = {nonce.session_id}"]
    conf += _conf_lines("backbone", backbone_config)
    conf += _conf_lines("side", side_config)
    (directory / SESSION_CONF).write_text("\n".join(conf) + "\n", encoding="utf-8")

    secret = directory / NONCE_FILE
    fd = os.open(secret, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as f:
        f.write(encode_nonce(nonce))
    os.chmod(secret, 0o600)

    if side_network is not None:
        (directory / SIDE_FILE).write_bytes(serialize_side_network(side_network))
    if backbone is not None:
        save_weights(backbone, directory / BACKBONE_FILE)


def load_session(directory: Path) -> DeviceSession:
    """Read a session directory written by ``save_session``.

    The backbone comes from ``backbone.paew`` when present, otherwise it is
    rebuilt from its config and seed.

    Raises:
        ConfigError: If a file is missing, malformed or inconsistent
    """
    conf_path = directory / SESSION_CONF
    if not conf_path.exists():
        raise ConfigError(f"{directory} is not a session directory")
    values = parse_flat(conf_path.read_text(encoding="utf-8"), source=str(conf_path))
    backbone_config: BackboneConfig = _read_conf(values, "backbone", BackboneConfig)  # type: ignore[assignment]
    side_config: SideNetworkConfig = _read_conf(values, "side", SideNetworkConfig)  # type: ignore[assignment]
    backbone_config.validate()
    side_config.validate()

    nonce = decode_nonce((directory / NONCE_FILE).read_bytes())
    if nonce.values.size != backbone_config.num_classes:
        raise ConfigError("nonce does not match the configured class count")

    weights = directory / BACKBONE_FILE
    backbone = load_weights(weights) if weights.exists() else build_backbone(backbone_config)
    if backbone.config != backbone_config:
        raise ConfigError("exported backbone does not match session.conf")

    side_path = directory / SIDE_FILE
    side_network = (
        deserialize_side_network(side_path.read_bytes()) if side_path.exists() else None
    )
    return DeviceSession(backbone_config, side_config, nonce, backbone, side_network)


def predict(
    backbone: BackboneModel,
    side_network: Optional[SideNetwork],
    nonce: NonceKey,
    tokens: NDArray[np.int64],
    pad_mask: NDArray[np.bool_],
) -> Tensor:
    """Fused output y_pre + y_side - R for a batch of token sequences.

    Raises:
        UsageError: If no side network has been deployed
    """
    if side_network is None:
        raise UsageError("no deployed side network; finish a fine-tuning session first")
    trace = forward(backbone, tokens, pad_mask)
    # The side network was trained on wire-precision activations.
    acts = pivot_activations(backbone, trace, pad_mask).astype(np.float32).astype(np.float64)
    y_side, _ = side_forward(side_network, list(acts))
    return fuse_output(trace.y_pre, y_side, nonce)


def classify(y_output: Tensor) -> NDArray[np.int64]:
    return np.argmax(y_output, axis=-1)
