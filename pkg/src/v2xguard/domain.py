"""Shared value types: kinematic states, CAM records, attack labels."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

EGO_ID = "ego"

FEATURE_NAMES = (
    "dx",
    "dy",
    "dspd_x",
    "dspd_y",
    "dacl_x",
    "dacl_y",
    "dhed_x",
    "dhed_y",
)
NUM_FEATURES = len(FEATURE_NAMES)

HEADING_TOLERANCE = 1e-3


class MsgType(enum.IntEnum):
    """VeReMi++ message type codes."""

    EGO = 2
    RECEIVED = 3


class AttackLabel(enum.IntEnum):
    BENIGN = 0
    CONST_POSITION = 1
    CONST_POS_OFFSET = 2
    RANDOM_POSITION = 3
    RANDOM_POS_OFFSET = 4
    CONST_SPEED = 5
    CONST_SPEED_OFFSET = 6
    RANDOM_SPEED = 7
    RANDOM_SPEED_OFFSET = 8
    EVENTUAL_STOP = 9
    DISRUPTIVE = 10
    DATA_REPLAY = 11
    DELAYED_MESSAGES = 12
    DOS = 13
    DOS_RANDOM = 14
    DOS_DISRUPTIVE = 15
    GRID_SYBIL = 16
    DATA_REPLAY_SYBIL = 17
    DOS_RANDOM_SYBIL = 18
    DOS_DISRUPTIVE_SYBIL = 19

    @property
    def code(self) -> str:
        return f"A{self.value}"

    @classmethod
    def parse(cls, text: str | int | AttackLabel) -> AttackLabel:
        if isinstance(text, cls):
            return text
        if isinstance(text, int):
            return cls(text)
        s = str(text).strip()
        if s[:1] in ("A", "a") and s[1:].isdigit():
            return cls(int(s[1:]))
        if s.isdigit():
            return cls(int(s))
        try:
            return cls[s.upper()]
        except KeyError:
            raise ValueError(f"unknown attack label: {text!r}") from None

    @property
    def is_sybil(self) -> bool:
        return self.value >= 16

    @property
    def is_dos(self) -> bool:
        return self in (
            AttackLabel.DOS,
            AttackLabel.DOS_RANDOM,
            AttackLabel.DOS_DISRUPTIVE,
            AttackLabel.DOS_RANDOM_SYBIL,
            AttackLabel.DOS_DISRUPTIVE_SYBIL,
        )

    def __str__(self) -> str:
        return self.code


@dataclass(frozen=True, slots=True)
class KinematicState:
    """Planar kinematic state. Heading is a unit vector, or (0, 0) when unknown."""

    pos_x: float
    pos_y: float
    spd_x: float
    spd_y: float
    acl_x: float
    acl_y: float
    hed_x: float
    hed_y: float

    def __post_init__(self) -> None:
        vals = self.as_tuple()
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite kinematic component in {vals}")
        norm2 = self.hed_x * self.hed_x + self.hed_y * self.hed_y
        if norm2 != 0.0 and abs(norm2 - 1.0) > HEADING_TOLERANCE:
            raise ValueError(f"heading ({self.hed_x}, {self.hed_y}) is not a unit vector")

    def as_tuple(self) -> tuple[float, ...]:
        return (
            self.pos_x,
            self.pos_y,
            self.spd_x,
            self.spd_y,
            self.acl_x,
            self.acl_y,
            self.hed_x,
            self.hed_y,
        )

    @classmethod
    def from_sequence(cls, values) -> KinematicState:
        vals = [float(v) for v in values]
        if len(vals) != 8:
            raise ValueError(f"expected 8 kinematic components, got {len(vals)}")
        return cls(*vals)

    def replace(self, **changes: float) -> KinematicState:
        fields = dict(zip(_STATE_FIELDS, self.as_tuple()))
        fields.update(changes)
        return KinematicState(**fields)


_STATE_FIELDS = ("pos_x", "pos_y", "spd_x", "spd_y", "acl_x", "acl_y", "hed_x", "hed_y")


@dataclass(frozen=True, slots=True)
class CamRecord:
    msg_type: MsgType
    recv_time: float
    send_time: float
    sender_id: str
    state: KinematicState
    label: AttackLabel = AttackLabel.BENIGN

    def __post_init__(self) -> None:
        if self.msg_type == MsgType.EGO:
            if self.sender_id != EGO_ID:
                raise ValueError(f"ego record must use sender id {EGO_ID!r}, got {self.sender_id!r}")
        elif self.send_time < 0 or self.recv_time < self.send_time:
            raise ValueError(
                f"received record needs recv_time >= send_time >= 0 "
                f"(recv={self.recv_time}, send={self.send_time})"
            )

    @property
    def is_ego(self) -> bool:
        return self.msg_type == MsgType.EGO


@dataclass(frozen=True, slots=True)
class RelativeFeatureVector:
    """CAM-minus-ego deltas in FEATURE_NAMES order, stamped with the CAM receive time."""

    values: tuple[float, ...]
    timestamp: float

    def __post_init__(self) -> None:
        if len(self.values) != NUM_FEATURES:
            raise ValueError(f"expected {NUM_FEATURES} features, got {len(self.values)}")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("non-finite relative feature")


@dataclass(frozen=True, slots=True)
class SenderSequence:
    """Gap-split feature sequence for one sender.

    Each segment is a tuple of (timestamp, RelativeFeatureVector) pairs with
    strictly increasing timestamps.
    """

    sender_id: str
    label: AttackLabel
    segments: tuple[tuple[tuple[float, RelativeFeatureVector], ...], ...]

    def __post_init__(self) -> None:
        for seg in self.segments:
            if not seg:
                raise ValueError("empty segment")
            times = [t for t, _ in seg]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError(f"segment times not strictly increasing for {self.sender_id}")

    @property
    def num_messages(self) -> int:
        return sum(len(s) for s in self.segments)
