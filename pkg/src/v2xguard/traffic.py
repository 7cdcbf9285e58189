"""Synthetic benign traffic on a two-way multi-lane ring road.

Vehicles follow an IDM-style car-following law with minimum-jerk lane changes and
occasional hard-braking pulses. One vehicle is the ego; every other vehicle
broadcasts CAMs that the ego receives while it is within radio range.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from .domain import EGO_ID, CamRecord, KinematicState, MsgType
from .ingestion import TraceFile


class Regime(str, enum.Enum):
    RUSH_HOUR = "rush_hour"
    AFTERNOON = "afternoon"


# (mean, std, max) of desired speed in m/s, and IDM time headway in s
_REGIME_SPEED = {
    Regime.RUSH_HOUR: (12.0, 2.5, 20.0, 1.6),
    Regime.AFTERNOON: (18.0, 3.0, 28.0, 1.2),
}


@dataclass(frozen=True)
class TrafficConfig:
    seed: int
    num_senders: int
    duration: float
    cam_period: float = 1.0
    regime: Regime = Regime.AFTERNOON
    lane_count: int = 2
    lane_width: float = 3.5
    segment_length: float = 2000.0
    comm_range: float = 500.0
    max_accel: float = 4.0
    brake_prob: float = 0.002
    lane_change_prob: float = 0.01
    loss_prob: float = 0.01
    pos_noise: float = 0.3
    spd_noise: float = 0.1
    acl_noise: float = 0.02
    hed_noise: float = 0.01
    max_jerk: float = 4.0
    sim_dt: float = 0.1
    sender_prefix: str = "v"

    def __post_init__(self) -> None:
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.num_senders < 1:
            raise ValueError("num_senders must be >= 1")
        if self.cam_period <= 0:
            raise ValueError("cam_period must be positive")
        if self.duration < 15 * self.cam_period:
            raise ValueError("duration must cover at least 15 CAM periods")
        if self.lane_count < 1 or self.lane_width <= 0 or self.segment_length <= 0:
            raise ValueError("invalid road geometry")
        if self.max_jerk <= 0:
            raise ValueError("max_jerk must be positive")
        if self.sim_dt <= 0 or self.sim_dt > self.cam_period:
            raise ValueError("sim_dt must be in (0, cam_period]")
        ratio = self.cam_period / self.sim_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("cam_period must be an integer multiple of sim_dt")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regime"] = self.regime.value
        return d


_VEH_LENGTH = 5.0
_IDM_ACCEL = 1.5
_IDM_DECEL = 2.0
_IDM_MIN_GAP = 2.0
_LANE_CHANGE_TIME = 6.0


def _desired_speeds(rng: np.random.Generator, regime: Regime, n: int) -> np.ndarray:
    mean, std, vmax, _ = _REGIME_SPEED[regime]
    return np.clip(rng.normal(mean, std, n), 0.0, vmax)


def generate(config: TrafficConfig) -> TraceFile:
    """Simulate one scene; deterministic in ``config``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_senders + 1  # index 0 is the ego
    radius = cfg.segment_length / (2 * math.pi)
    h = cfg.sim_dt
    steps_per_cam = int(round(cfg.cam_period / h))
    n_steps = int(math.ceil(cfg.duration / h))
    headway = _REGIME_SPEED[cfg.regime][3]

    direction = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    direction[0] = 1.0
    lane = rng.integers(0, cfg.lane_count, n)
    v0 = _desired_speeds(rng, cfg.regime, n)
    v = v0 * rng.uniform(0.8, 1.0, n)
    # arc coordinate along each vehicle's travel direction; spread evenly with jitter
    s = (np.arange(n) + rng.uniform(-0.3, 0.3, n)) * cfg.segment_length / n
    s = np.mod(s + rng.uniform(0, cfg.segment_length), cfg.segment_length)

    def lane_offset(d: np.ndarray, ln: np.ndarray) -> np.ndarray:
        # direction +1 runs on the inner lanes, -1 on the outer lanes
        return -d * (ln + 0.5) * cfg.lane_width

    lat_from = lane_offset(direction, lane)
    lat_to = lat_from.copy()
    lc_start = np.full(n, -np.inf)
    brake_until = np.full(n, -np.inf)
    brake_acc = np.zeros(n)
    phase = rng.integers(0, steps_per_cam, n)
    phase[0] = 0
    step_brake_p = 1.0 - (1.0 - cfg.brake_prob) ** (h / cfg.cam_period)
    step_lc_p = 1.0 - (1.0 - cfg.lane_change_prob) ** (h / cfg.cam_period)

    def lateral(t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        tau = np.clip((t - lc_start) / _LANE_CHANGE_TIME, 0.0, 1.0)
        active = (tau > 0) & (tau < 1)
        span = lat_to - lat_from
        big_t = _LANE_CHANGE_TIME
        # minimum-jerk profile: lateral velocity and acceleration start and end at zero
        off = lat_from + span * (10 * tau**3 - 15 * tau**4 + 6 * tau**5)
        d1 = np.where(active, span * (30 * tau**2 - 60 * tau**3 + 30 * tau**4) / big_t, 0.0)
        d2 = np.where(active, span * (60 * tau - 180 * tau**2 + 120 * tau**3) / big_t**2, 0.0)
        return off, d1, d2

    records: list[tuple[float, int, CamRecord]] = []
    accel = np.zeros(n)
    mean_latency = 0.005

    for step in range(n_steps + 1):
        t = step * h
        off, off_d1, off_d2 = lateral(t)
        r = radius + off
        sample = (step - phase) % steps_per_cam == 0
        if sample.any() and t < cfg.duration:
            ang = direction * s / radius
            tx, ty = -np.sin(ang), np.cos(ang)
            rx, ry = np.cos(ang), np.sin(ang)
            px, py = r * rx, r * ry
            vt = direction * v
            # velocity / acceleration of p = r(t) * (cos ang, sin ang)
            spd_x = vt * tx + off_d1 * rx
            spd_y = vt * ty + off_d1 * ry
            at = direction * (accel + v * off_d1 / r)
            an = off_d2 - v * v / r
            acl_x = at * tx + an * rx
            acl_y = at * ty + an * ry
            hx, hy = spd_x.copy(), spd_y.copy()
            norm = np.hypot(hx, hy)
            slow = norm < 0.1
            hx[slow], hy[slow] = direction[slow] * tx[slow], direction[slow] * ty[slow]
            norm = np.hypot(hx, hy)
            hx, hy = hx / norm, hy / norm
            for i in np.flatnonzero(sample):
                i = int(i)
                if i > 0:
                    dist = math.hypot(px[i] - px[0], py[i] - py[0])
                    if dist > cfg.comm_range or rng.random() < cfg.loss_prob:
                        continue
                state = _noisy_state(
                    rng, cfg, px[i], py[i], spd_x[i], spd_y[i], acl_x[i], acl_y[i], hx[i], hy[i]
                )
                if i == 0:
                    rec = CamRecord(MsgType.EGO, t, t, EGO_ID, state)
                else:
                    recv = t + float(rng.uniform(0.5, 1.5)) * mean_latency
                    rec = CamRecord(MsgType.RECEIVED, recv, t, f"{cfg.sender_prefix}{i}", state)
                records.append((rec.recv_time, i, rec))
        if step == n_steps:
            break

        # leader search on the same directed lane
        target_lane = lane
        same = (direction[:, None] == direction[None, :]) & (target_lane[:, None] == target_lane[None, :])
        np.fill_diagonal(same, False)
        gap = np.mod(s[None, :] - s[:, None], cfg.segment_length) - _VEH_LENGTH
        gap = np.where(same, gap, np.inf)
        lead = np.argmin(gap, axis=1)
        lead_gap = np.maximum(gap[np.arange(n), lead], 0.1)
        has_lead = np.isfinite(lead_gap)
        dv = v - v[lead]
        s_star = _IDM_MIN_GAP + v * headway + v * dv / (2 * math.sqrt(_IDM_ACCEL * _IDM_DECEL))
        s_star = np.maximum(s_star, 0.0)
        interaction = np.where(has_lead, (s_star / np.where(has_lead, lead_gap, 1.0)) ** 2, 0.0)
        free = 1 - (v / np.maximum(v0, 0.1)) ** 4
        a = _IDM_ACCEL * (free - interaction)

        start_brake = (rng.random(n) < step_brake_p) & (brake_until < t)
        if start_brake.any():
            k = int(start_brake.sum())
            brake_until[start_brake] = t + rng.uniform(1.0, 2.0, k)
            brake_acc[start_brake] = rng.uniform(-4.0, -3.0, k)
        braking = brake_until > t
        a = np.where(braking, np.minimum(a, brake_acc), a)

        # bound the total acceleration vector by max_accel
        normal = v * v / r + np.abs(off_d2)
        at_max = np.sqrt(np.maximum(cfg.max_accel**2 - normal**2, 0.0)) * 0.98
        # drivers and actuators cannot change longitudinal acceleration instantly
        a = np.clip(a, accel - cfg.max_jerk * h, accel + cfg.max_jerk * h)
        a = np.clip(a, -at_max, at_max)
        v_new = np.maximum(v + a * h, 0.0)
        accel = (v_new - v) / h
        s = np.mod(s + (v + v_new) / 2 * h, cfg.segment_length)
        v = v_new

        idle = ~((lc_start <= t) & (t < lc_start + _LANE_CHANGE_TIME))
        want_lc = idle & (rng.random(n) < step_lc_p) & (cfg.lane_count > 1)
        for i in np.flatnonzero(want_lc):
            i = int(i)
            options = [x for x in (lane[i] - 1, lane[i] + 1) if 0 <= x < cfg.lane_count]
            new_lane = options[int(rng.integers(0, len(options)))]
            if not _gap_accepted(i, new_lane, s, v, direction, lane, headway, cfg.segment_length):
                continue
            lat_from[i] = lane_offset(direction[i : i + 1], lane[i : i + 1])[0]
            lane[i] = new_lane
            lat_to[i] = lane_offset(direction[i : i + 1], lane[i : i + 1])[0]
            lc_start[i] = t + h

    records.sort(key=lambda x: (x[0], x[1]))
    return TraceFile(None, tuple(rec for _, _, rec in records))


def _gap_accepted(i, new_lane, s, v, direction, lane, headway, length) -> bool:
    """Gap acceptance: the vehicle ahead and behind in the target lane both keep
    at least their IDM desired gap, so a lane change never forces hard braking."""
    peers = np.flatnonzero((direction == direction[i]) & (lane == new_lane))
    peers = peers[peers != i]
    if peers.size == 0:
        return True
    ahead = np.mod(s[peers] - s[i], length) - _VEH_LENGTH
    behind = np.mod(s[i] - s[peers], length) - _VEH_LENGTH
    j_ahead, j_behind = int(np.argmin(ahead)), int(np.argmin(behind))
    need_ahead = _IDM_MIN_GAP + v[i] * headway
    need_behind = _IDM_MIN_GAP + v[peers[j_behind]] * headway
    return bool(ahead[j_ahead] >= need_ahead and behind[j_behind] >= need_behind)


def _noisy_state(rng, cfg: TrafficConfig, px, py, sx, sy, ax, ay, hx, hy) -> KinematicState:
    if cfg.pos_noise:
        px += rng.normal(0, cfg.pos_noise)
        py += rng.normal(0, cfg.pos_noise)
    if cfg.spd_noise:
        sx += rng.normal(0, cfg.spd_noise)
        sy += rng.normal(0, cfg.spd_noise)
    if cfg.acl_noise:
        ax += rng.normal(0, cfg.acl_noise)
        ay += rng.normal(0, cfg.acl_noise)
    if cfg.hed_noise:
        ang = math.atan2(hy, hx) + rng.normal(0, cfg.hed_noise)
        hx, hy = math.cos(ang), math.sin(ang)
    return KinematicState(float(px), float(py), float(sx), float(sy), float(ax), float(ay), float(hx), float(hy))


def noise_free(config: TrafficConfig) -> TrafficConfig:
    d = config.to_dict()
    d.update(pos_noise=0.0, spd_noise=0.0, acl_noise=0.0, hed_noise=0.0, loss_prob=0.0)
    return TrafficConfig(**d)
