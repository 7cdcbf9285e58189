"""Small record builders shared by the test modules."""

from __future__ import annotations

import math

from v2xguard.domain import EGO_ID, CamRecord, KinematicState, MsgType

ZERO = KinematicState(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def make_state(x=0.0, y=0.0, vx=0.0, vy=0.0, ax=0.0, ay=0.0, heading=0.0) -> KinematicState:
    vals = (x, y, vx, vy, ax, ay, math.cos(heading), math.sin(heading))
    return KinematicState(*(float(v) for v in vals))


def ego(t: float, state: KinematicState = ZERO) -> CamRecord:
    return CamRecord(MsgType.EGO, t, t, EGO_ID, state)


def cam(t: float, sender: str = "v1", state: KinematicState = ZERO, send: float | None = None) -> CamRecord:
    return CamRecord(MsgType.RECEIVED, t, t if send is None else send, sender, state)
