"""Message types exchanged between device and server.

No message has a field for labels, token ids, backbone weights or the nonce.
"""

from dataclasses import dataclass, fields
from enum import IntEnum
from typing import Union

import numpy as np

from ..errors import ErrorCode
from ..model import ArchKind, Nonlinearity, OptimizerKind, SideNetworkConfig


class MsgType(IntEnum):
    INIT = 1
    ACTIVATION_RECORD = 2
    EPOCH_DONE = 3
    TRAIN_STATUS = 4
    DEPLOY_SIDE_NET = 5
    ACK = 6
    ERROR = 7
    FULL_ACTIVATION_RECORD = 8


class _ArrayEq:
    """Field-wise equality that compares numpy arrays by value."""

    def __eq__(self, other: object) -> bool:
        if type(other) is not type(self):
            return NotImplemented
        for f in fields(self):  # type: ignore[arg-type]
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True


@dataclass(frozen=True)
class MsgInit:
    """Session metadata the server needs to build a matched side network."""

    session_id: int
    num_layers: int
    hidden_size: int
    num_classes: int
    arch_kind: ArchKind
    bottleneck: int
    learning_rate: float
    optimizer: OptimizerKind
    adam_beta1: float
    adam_beta2: float
    adam_eps: float
    side_seed: int
    nonlinearity: Nonlinearity
    dataset_size: int
    batch_size: int

    msg_type = MsgType.INIT

    def side_config(self) -> SideNetworkConfig:
        return SideNetworkConfig(
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


@dataclass(frozen=True, eq=False)
class MsgActivationRecord(_ArrayEq):
    """One batch of pivot activations and masked targets.

    Attributes:
        session_id: Session the batch belongs to
        epoch: Always 1; later epochs never leave the server
        batch_index: Position of the batch in the epoch
        sample_ids: Device-assigned 64-bit ids, length B
        activations: float32 [L, B, H], layer-major
        delta_y: float32 [B, C]
    """

    session_id: int
    epoch: int
    batch_index: int
    sample_ids: tuple[int, ...]
    activations: np.ndarray
    delta_y: np.ndarray

    msg_type = MsgType.ACTIVATION_RECORD


@dataclass(frozen=True, eq=False)
class MsgFullActivationRecord(_ArrayEq):
    """Full-sequence hidden states for the iterative side-tuning baseline.

    Attributes:
        hidden_states: float32 [L, B, L_seq, H]
        pivot_index: Pivot position per sample, length B
    """

    session_id: int
    epoch: int
    batch_index: int
    sample_ids: tuple[int, ...]
    pivot_index: tuple[int, ...]
    hidden_states: np.ndarray
    delta_y: np.ndarray

    msg_type = MsgType.FULL_ACTIVATION_RECORD


@dataclass(frozen=True)
class MsgEpochDone:
    session_id: int
    sample_count: int

    msg_type = MsgType.EPOCH_DONE


@dataclass(frozen=True)
class MsgTrainStatus:
    epoch: int
    mean_loss: float
    step_count: int

    msg_type = MsgType.TRAIN_STATUS


@dataclass(frozen=True)
class MsgDeploySideNet:
    """Serialized side network (PAES blob); the only message carrying parameters."""

    side_network: bytes

    msg_type = MsgType.DEPLOY_SIDE_NET


@dataclass(frozen=True)
class MsgAck:
    acked_type: MsgType
    batch_index: int

    msg_type = MsgType.ACK


@dataclass(frozen=True)
class MsgError:
    code: ErrorCode
    message: str

    msg_type = MsgType.ERROR


Message = Union[
    MsgInit,
    MsgActivationRecord,
    MsgFullActivationRecord,
    MsgEpochDone,
    MsgTrainStatus,
    MsgDeploySideNet,
    MsgAck,
    MsgError,
]

MESSAGE_CLASSES: dict[MsgType, type] = {
    MsgType.INIT: MsgInit,
    MsgType.ACTIVATION_RECORD: MsgActivationRecord,
    MsgType.EPOCH_DONE: MsgEpochDone,
    MsgType.TRAIN_STATUS: MsgTrainStatus,
    MsgType.DEPLOY_SIDE_NET: MsgDeploySideNet,
    MsgType.ACK: MsgAck,
    MsgType.ERROR: MsgError,
    MsgType.FULL_ACTIVATION_RECORD: MsgFullActivationRecord,
}
