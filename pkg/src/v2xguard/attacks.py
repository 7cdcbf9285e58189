"""Falsification injectors for the nineteen attack families.

Each injector rewrites the received records of the chosen victim senders and
tags every emitted record with the attack label. Records of other senders and
the ego are passed through untouched.
"""

from __future__ import annotations

import bisect
import logging
import math
import zlib
from collections.abc import Iterable
from dataclasses import asdict, dataclass, replace

import numpy as np

from .domain import AttackLabel, CamRecord, KinematicState, MsgType
from .ingestion import TraceFile

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    label: AttackLabel
    seed: int = 0
    pos_offset: float = 5.0
    pos_offset_vector: tuple[float, float] | None = None
    random_pos_radius: float = 50.0
    max_speed: float = 25.0
    speed_offset: float = 5.0
    speed_offset_vector: tuple[float, float] | None = None
    random_speed_offset: float = 10.0
    max_accel: float = 4.0
    stop_ramp: float = 10.0
    stop_onset: float | None = None
    replay_source: str | None = None
    replay_min_lag: float = 5.0
    delay: float = 2.5
    dos_multiplier: int = 10
    grid_size: int = 3
    grid_spacing: float = 10.0
    ghost_count: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "label", AttackLabel.parse(self.label))
        if self.label == AttackLabel.BENIGN:
            raise ValueError("attack label must not be A0")
        positive = (
            "pos_offset",
            "random_pos_radius",
            "max_speed",
            "speed_offset",
            "random_speed_offset",
            "max_accel",
            "stop_ramp",
            "delay",
            "grid_spacing",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.dos_multiplier < 1 or self.grid_size < 1 or self.ghost_count < 1:
            raise ValueError("dos_multiplier, grid_size and ghost_count must be >= 1")
        if self.replay_min_lag < 0:
            raise ValueError("replay_min_lag must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label"] = self.label.code
        return d


@dataclass(frozen=True)
class Scene:
    xmin: float
    xmax: float
    ymin: float
    ymax: float
    cam_period: float

    @classmethod
    def of(cls, trace: TraceFile) -> Scene:
        xs = [r.state.pos_x for r in trace.records]
        ys = [r.state.pos_y for r in trace.records]
        egos = [r.recv_time for r in trace.records if r.is_ego]
        period = float(np.median(np.diff(egos))) if len(egos) > 1 else 1.0
        return cls(min(xs), max(xs), min(ys), max(ys), period if period > 0 else 1.0)


def _rng(cfg: AttackConfig, *keys: str | int) -> np.random.Generator:
    parts = [cfg.seed & 0xFFFFFFFF, int(cfg.label)]
    for k in keys:
        parts.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(parts)


def _disk(rng: np.random.Generator, radius: float) -> tuple[float, float]:
    r = radius * math.sqrt(rng.random())
    a = rng.uniform(0, 2 * math.pi)
    return r * math.cos(a), r * math.sin(a)


def _direction(rng: np.random.Generator, magnitude: float) -> tuple[float, float]:
    a = rng.uniform(0, 2 * math.pi)
    return magnitude * math.cos(a), magnitude * math.sin(a)


def _random_point(rng: np.random.Generator, scene: Scene) -> tuple[float, float]:
    return float(rng.uniform(scene.xmin, scene.xmax)), float(rng.uniform(scene.ymin, scene.ymax))


def _random_state(rng: np.random.Generator, scene: Scene, cfg: AttackConfig) -> KinematicState:
    px, py = _random_point(rng, scene)
    sx, sy = _direction(rng, rng.uniform(0, cfg.max_speed))
    ax, ay = _disk(rng, cfg.max_accel)
    hx, hy = _direction(rng, 1.0)
    return KinematicState(px, py, sx, sy, ax, ay, hx, hy)


def _relabel(rec: CamRecord, label: AttackLabel, **changes) -> CamRecord:
    return replace(rec, label=label, **changes)


class _Disruptor:
    """Draws the state of a random earlier message from some other sender."""

    def __init__(self, trace: TraceFile, exclude: set[str]):
        pool = [r for r in trace.records if not r.is_ego and r.sender_id not in exclude]
        pool.sort(key=lambda r: r.recv_time)
        self._times = [r.recv_time for r in pool]
        self._pool = pool

    def draw(self, rng: np.random.Generator, sender: str, t: float) -> KinematicState | None:
        n = bisect.bisect_left(self._times, t)
        if n == 0:
            return None
        for _ in range(8):
            cand = self._pool[int(rng.integers(0, n))]
            if cand.sender_id != sender:
                return cand.state
        return None


def _dos_times(records: list[CamRecord], multiplier: int, period: float) -> list[tuple[CamRecord, float]]:
    """(source record, new receive time) pairs at ``multiplier`` times the rate."""
    out = []
    for i, rec in enumerate(records):
        nxt = records[i + 1].recv_time - rec.recv_time if i + 1 < len(records) else period
        step = min(nxt, period) / multiplier
        for j in range(multiplier):
            out.append((rec, rec.recv_time + j * step))
    return out


def _shifted(rec: CamRecord, recv: float, **changes) -> dict:
    latency = rec.recv_time - rec.send_time
    return dict(recv_time=recv, send_time=max(recv - latency, 0.0), **changes)


def _replay(source: list[CamRecord], start: float, min_lag: float, sender: str, label: AttackLabel) -> list[CamRecord]:
    lag = max(start - source[0].recv_time, min_lag)
    return [
        _relabel(r, label, sender_id=sender, **_shifted(r, r.recv_time + lag))
        for r in source
    ]


def inject(trace: TraceFile, victims: Iterable[str], cfg: AttackConfig) -> TraceFile:
    """Apply ``cfg.label`` to every victim; deterministic in (trace, victims, cfg)."""
    victims = sorted(set(victims))
    if not victims:
        logger.warning("inject: empty victim set, trace returned unchanged")
        return trace
    by_sender: dict[str, list[CamRecord]] = {}
    for r in trace.records:
        if not r.is_ego:
            by_sender.setdefault(r.sender_id, []).append(r)
    missing = [v for v in victims if v not in by_sender]
    if missing:
        raise KeyError(f"victims not present in trace: {missing}")
    for recs in by_sender.values():
        recs.sort(key=lambda r: r.recv_time)

    scene = Scene.of(trace)
    vset = set(victims)
    benign_ids = sorted(s for s in by_sender if s not in vset)
    disruptor = _Disruptor(trace, vset) if cfg.label in _NEEDS_DISRUPTOR else None
    kept = [r for r in trace.records if r.is_ego or r.sender_id not in vset]
    injected: list[CamRecord] = []
    for victim in victims:
        rng = _rng(cfg, victim)
        ctx = _Context(cfg, scene, rng, disruptor, by_sender, benign_ids)
        injected.extend(_INJECTORS[cfg.label](ctx, victim, by_sender[victim]))

    benign = set(benign_ids)
    for rec in injected:
        if rec.sender_id in benign:
            raise AssertionError(f"injected record collides with benign sender {rec.sender_id}")
    records = kept + injected
    records.sort(key=lambda r: r.recv_time)
    return TraceFile(trace.path, tuple(records))


@dataclass
class _Context:
    cfg: AttackConfig
    scene: Scene
    rng: np.random.Generator
    disruptor: _Disruptor | None
    by_sender: dict[str, list[CamRecord]]
    benign_ids: list[str]


def _a1(ctx, victim, recs):
    px, py = _random_point(ctx.rng, ctx.scene)
    return [_relabel(r, ctx.cfg.label, state=r.state.replace(pos_x=px, pos_y=py)) for r in recs]


def _a2(ctx, victim, recs):
    cfg = ctx.cfg
    ox, oy = cfg.pos_offset_vector if cfg.pos_offset_vector is not None else _direction(ctx.rng, cfg.pos_offset)
    return [
        _relabel(r, cfg.label, state=r.state.replace(pos_x=r.state.pos_x + ox, pos_y=r.state.pos_y + oy))
        for r in recs
    ]


def _a3(ctx, victim, recs):
    out = []
    for r in recs:
        px, py = _random_point(ctx.rng, ctx.scene)
        out.append(_relabel(r, ctx.cfg.label, state=r.state.replace(pos_x=px, pos_y=py)))
    return out


def _a4(ctx, victim, recs):
    out = []
    for r in recs:
        ox, oy = _disk(ctx.rng, ctx.cfg.random_pos_radius)
        out.append(_relabel(r, ctx.cfg.label, state=r.state.replace(pos_x=r.state.pos_x + ox, pos_y=r.state.pos_y + oy)))
    return out


def _a5(ctx, victim, recs):
    sx, sy = _direction(ctx.rng, ctx.rng.uniform(0, ctx.cfg.max_speed))
    return [_relabel(r, ctx.cfg.label, state=r.state.replace(spd_x=sx, spd_y=sy)) for r in recs]


def _a6(ctx, victim, recs):
    cfg = ctx.cfg
    ox, oy = cfg.speed_offset_vector if cfg.speed_offset_vector is not None else _direction(ctx.rng, cfg.speed_offset)
    return [
        _relabel(r, cfg.label, state=r.state.replace(spd_x=r.state.spd_x + ox, spd_y=r.state.spd_y + oy))
        for r in recs
    ]


def _a7(ctx, victim, recs):
    out = []
    for r in recs:
        sx, sy = _direction(ctx.rng, ctx.rng.uniform(0, ctx.cfg.max_speed))
        out.append(_relabel(r, ctx.cfg.label, state=r.state.replace(spd_x=sx, spd_y=sy)))
    return out


def _a8(ctx, victim, recs):
    out = []
    for r in recs:
        ox, oy = _disk(ctx.rng, ctx.cfg.random_speed_offset)
        out.append(_relabel(r, ctx.cfg.label, state=r.state.replace(spd_x=r.state.spd_x + ox, spd_y=r.state.spd_y + oy)))
    return out


def _a9(ctx, victim, recs):
    cfg = ctx.cfg
    t_first, t_last = recs[0].recv_time, recs[-1].recv_time
    if cfg.stop_onset is not None:
        onset = t_first + cfg.stop_onset
    else:
        onset = t_first + ctx.rng.uniform(0.1, 0.5) * (t_last - t_first)
    out = []
    origin = None
    for r in recs:
        if r.recv_time < onset:
            out.append(_relabel(r, cfg.label))
            continue
        if origin is None:
            origin = r
        s0 = origin.state
        dt = r.recv_time - origin.recv_time
        ramp = cfg.stop_ramp
        if dt < ramp:
            frac = 1.0 - dt / ramp
            travelled = dt - dt * dt / (2 * ramp)
            ax, ay = -s0.spd_x / ramp, -s0.spd_y / ramp
        else:
            frac, travelled, ax, ay = 0.0, ramp / 2, 0.0, 0.0
        state = KinematicState(
            s0.pos_x + s0.spd_x * travelled,
            s0.pos_y + s0.spd_y * travelled,
            s0.spd_x * frac,
            s0.spd_y * frac,
            ax,
            ay,
            s0.hed_x,
            s0.hed_y,
        )
        out.append(_relabel(r, cfg.label, state=state))
    return out


def _disrupted(ctx, sender, rec, t) -> KinematicState:
    state = ctx.disruptor.draw(ctx.rng, sender, t)
    return rec.state if state is None else state


def _a10(ctx, victim, recs):
    return [_relabel(r, ctx.cfg.label, state=_disrupted(ctx, victim, r, r.recv_time)) for r in recs]


def _replay_source(ctx, victim, taken: set[str]) -> str:
    cfg = ctx.cfg
    if cfg.replay_source is not None:
        if cfg.replay_source not in ctx.by_sender or cfg.replay_source == victim:
            raise KeyError(f"replay source {cfg.replay_source!r} not available in trace")
        return cfg.replay_source
    options = [s for s in ctx.benign_ids if s not in taken]
    if not options:
        raise KeyError("no benign sender available as replay source")
    return options[int(ctx.rng.integers(0, len(options)))]


def _a11(ctx, victim, recs):
    src = _replay_source(ctx, victim, set())
    return _replay(ctx.by_sender[src], recs[0].recv_time, ctx.cfg.replay_min_lag, victim, ctx.cfg.label)


def _a12(ctx, victim, recs):
    d = ctx.cfg.delay
    return [_relabel(r, ctx.cfg.label, recv_time=r.recv_time + d) for r in recs]


def _a13(ctx, victim, recs):
    cfg = ctx.cfg
    return [_relabel(r, cfg.label, **_shifted(r, t)) for r, t in _dos_times(recs, cfg.dos_multiplier, ctx.scene.cam_period)]


def _a14(ctx, victim, recs, sender=None):
    cfg = ctx.cfg
    sender = sender or victim
    return [
        _relabel(r, cfg.label, sender_id=sender, state=_random_state(ctx.rng, ctx.scene, cfg), **_shifted(r, t))
        for r, t in _dos_times(recs, cfg.dos_multiplier, ctx.scene.cam_period)
    ]


def _a15(ctx, victim, recs, sender=None):
    cfg = ctx.cfg
    sender = sender or victim
    return [
        _relabel(r, cfg.label, sender_id=sender, state=_disrupted(ctx, victim, r, t), **_shifted(r, t))
        for r, t in _dos_times(recs, cfg.dos_multiplier, ctx.scene.cam_period)
    ]


def ghost_id(victim: str, k: int) -> str:
    return f"{victim}#g{k}"


def _a16(ctx, victim, recs):
    cfg = ctx.cfg
    s0 = recs[0].state
    n = cfg.grid_size
    centre = (n - 1) / 2
    out = []
    for gi in range(n):
        for gj in range(n):
            k = gi * n + gj
            gx = s0.pos_x + (gi - centre) * cfg.grid_spacing
            gy = s0.pos_y + (gj - centre) * cfg.grid_spacing
            # a parked formation: fixed position, zero motion, attacker's initial heading
            state = KinematicState(gx, gy, 0.0, 0.0, 0.0, 0.0, s0.hed_x, s0.hed_y)
            out.extend(_relabel(r, cfg.label, sender_id=ghost_id(victim, k), state=state) for r in recs)
    return out


def _a17(ctx, victim, recs):
    taken: set[str] = set()
    out = []
    for k in range(ctx.cfg.ghost_count):
        options = [s for s in ctx.benign_ids if s not in taken]
        if not options:
            break
        src = options[int(ctx.rng.integers(0, len(options)))]
        taken.add(src)
        out.extend(_replay(ctx.by_sender[src], recs[0].recv_time, ctx.cfg.replay_min_lag, ghost_id(victim, k), ctx.cfg.label))
    return out


def _a18(ctx, victim, recs):
    out = []
    for k in range(ctx.cfg.ghost_count):
        out.extend(_a14(ctx, victim, recs, sender=ghost_id(victim, k)))
    return out


def _a19(ctx, victim, recs):
    out = []
    for k in range(ctx.cfg.ghost_count):
        out.extend(_a15(ctx, victim, recs, sender=ghost_id(victim, k)))
    return out


_INJECTORS = {
    AttackLabel.CONST_POSITION: _a1,
    AttackLabel.CONST_POS_OFFSET: _a2,
    AttackLabel.RANDOM_POSITION: _a3,
    AttackLabel.RANDOM_POS_OFFSET: _a4,
    AttackLabel.CONST_SPEED: _a5,
    AttackLabel.CONST_SPEED_OFFSET: _a6,
    AttackLabel.RANDOM_SPEED: _a7,
    AttackLabel.RANDOM_SPEED_OFFSET: _a8,
    AttackLabel.EVENTUAL_STOP: _a9,
    AttackLabel.DISRUPTIVE: _a10,
    AttackLabel.DATA_REPLAY: _a11,
    AttackLabel.DELAYED_MESSAGES: _a12,
    AttackLabel.DOS: _a13,
    AttackLabel.DOS_RANDOM: _a14,
    AttackLabel.DOS_DISRUPTIVE: _a15,
    AttackLabel.GRID_SYBIL: _a16,
    AttackLabel.DATA_REPLAY_SYBIL: _a17,
    AttackLabel.DOS_RANDOM_SYBIL: _a18,
    AttackLabel.DOS_DISRUPTIVE_SYBIL: _a19,
}

_NEEDS_DISRUPTOR = {AttackLabel.DISRUPTIVE, AttackLabel.DOS_DISRUPTIVE, AttackLabel.DOS_DISRUPTIVE_SYBIL}

ATTACK_LABELS = tuple(_INJECTORS)


def choose_victims(trace: TraceFile, fraction: float, seed: int, min_records: int = 1) -> list[str]:
    """Seeded pick of ``fraction`` of the received senders (at least one)."""
    counts: dict[str, int] = {}
    for r in trace.records:
        if r.msg_type == MsgType.RECEIVED:
            counts[r.sender_id] = counts.get(r.sender_id, 0) + 1
    ids = sorted(s for s, c in counts.items() if c >= min_records)
    if not ids:
        return []
    n = max(1, int(round(fraction * len(ids))))
    rng = np.random.default_rng(seed)
    return sorted(ids[i] for i in rng.choice(len(ids), size=min(n, len(ids)), replace=False))
