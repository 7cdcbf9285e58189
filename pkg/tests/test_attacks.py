from __future__ import annotations

import logging
import math

import numpy as np
import pytest

from v2xguard.attacks import ATTACK_LABELS, AttackConfig, choose_victims, ghost_id, inject
from v2xguard.domain import AttackLabel
from v2xguard.ingestion import TraceFile, iter_trace_lines
from v2xguard.traffic import TrafficConfig, generate


@pytest.fixture(scope="module")
def trace() -> TraceFile:
    return generate(TrafficConfig(seed=21, num_senders=8, duration=60.0))


def _by_sender(trace):
    out: dict[str, list] = {}
    for r in trace.records:
        if not r.is_ego:
            out.setdefault(r.sender_id, []).append(r)
    return out


def _victim(trace):
    counts = {k: len(v) for k, v in _by_sender(trace).items()}
    return max(sorted(counts), key=counts.get)


def _lines_of(trace, senders):
    return [line for r, line in zip(trace.records, iter_trace_lines(trace)) if r.is_ego or r.sender_id in senders]


class TestConfig:
    def test_benign_label_rejected(self):
        with pytest.raises(ValueError):
            AttackConfig(label=AttackLabel.BENIGN)

    def test_label_parsed(self):
        assert AttackConfig(label="A7").label == AttackLabel.RANDOM_SPEED

    @pytest.mark.parametrize("kw", [{"pos_offset": 0.0}, {"delay": -1.0}, {"dos_multiplier": 0}, {"grid_size": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AttackConfig(label=AttackLabel.CONST_POSITION, **kw)


class TestPositionAttacks:
    def test_a1_constant_position(self, trace):
        v = _victim(trace)
        out = _by_sender(inject(trace, [v], AttackConfig(label=AttackLabel.CONST_POSITION, seed=1)))[v]
        assert len({(r.state.pos_x, r.state.pos_y) for r in out}) == 1
        assert all(r.label == AttackLabel.CONST_POSITION for r in out)

    def test_a2_exact_offset(self, trace):
        v = _victim(trace)
        src = _by_sender(trace)[v]
        cfg = AttackConfig(label=AttackLabel.CONST_POS_OFFSET, pos_offset_vector=(3.0, 4.0))
        out = _by_sender(inject(trace, [v], cfg))[v]
        assert len(out) == len(src)
        for a, b in zip(src, out):
            assert b.state.pos_x - a.state.pos_x == pytest.approx(3.0, abs=1e-9)
            assert b.state.pos_y - a.state.pos_y == pytest.approx(4.0, abs=1e-9)
            sa, sb = a.state.as_tuple(), b.state.as_tuple()
            assert sa[2:] == sb[2:]
            assert (a.recv_time, a.send_time) == (b.recv_time, b.send_time)

    def test_a2_default_magnitude(self, trace):
        v = _victim(trace)
        a = _by_sender(trace)[v][0]
        b = _by_sender(inject(trace, [v], AttackConfig(label="A2", seed=4)))[v][0]
        assert math.hypot(b.state.pos_x - a.state.pos_x, b.state.pos_y - a.state.pos_y) == pytest.approx(5.0)

    def test_a3_inside_scene(self, trace):
        xs = [r.state.pos_x for r in trace.records]
        v = _victim(trace)
        out = _by_sender(inject(trace, [v], AttackConfig(label="A3")))[v]
        assert all(min(xs) <= r.state.pos_x <= max(xs) for r in out)
        assert len({r.state.pos_x for r in out}) == len(out)

    def test_a4_within_radius(self, trace):
        v = _victim(trace)
        src = _by_sender(trace)[v]
        out = _by_sender(inject(trace, [v], AttackConfig(label="A4", random_pos_radius=20.0)))[v]
        d = [math.hypot(b.state.pos_x - a.state.pos_x, b.state.pos_y - a.state.pos_y) for a, b in zip(src, out)]
        assert max(d) <= 20.0 + 1e-9 and min(d) >= 0.0


class TestSpeedAttacks:
    def test_a5_constant_speed(self, trace):
        v = _victim(trace)
        out = _by_sender(inject(trace, [v], AttackConfig(label="A5")))[v]
        assert len({(r.state.spd_x, r.state.spd_y) for r in out}) == 1

    def test_a6_offset(self, trace):
        v = _victim(trace)
        src = _by_sender(trace)[v]
        out = _by_sender(inject(trace, [v], AttackConfig(label="A6", speed_offset_vector=(1.0, -2.0))))[v]
        for a, b in zip(src, out):
            assert b.state.spd_x - a.state.spd_x == pytest.approx(1.0)
            assert b.state.spd_y - a.state.spd_y == pytest.approx(-2.0)
            assert a.state.pos_x == b.state.pos_x

    def test_a7_bounded(self, trace):
        v = _victim(trace)
        out = _by_sender(inject(trace, [v], AttackConfig(label="A7", max_speed=12.0)))[v]
        assert max(math.hypot(r.state.spd_x, r.state.spd_y) for r in out) <= 12.0 + 1e-9

    def test_a9_eventual_stop(self, trace):
        v = _victim(trace)
        out = _by_sender(inject(trace, [v], AttackConfig(label="A9", stop_onset=10.0)))[v]
        last = out[-1].state
        assert math.hypot(last.spd_x, last.spd_y) == 0.0
        origin = next(r.recv_time for r in out if r.recv_time >= out[0].recv_time + 10.0)
        tail = [(r.state.pos_x, r.state.pos_y) for r in out if r.recv_time >= origin + 10.0]
        assert len(tail) >= 5 and len(set(tail)) == 1

    def test_a9_speed_ramps_linearly(self, trace):
        v = _victim(trace)
        src = _by_sender(trace)[v]
        out = _by_sender(inject(trace, [v], AttackConfig(label="A9", stop_onset=10.0, stop_ramp=10.0)))[v]
        onset = next(i for i, r in enumerate(out) if r.recv_time >= out[0].recv_time + 10.0)
        s0 = src[onset].state
        for r in out[onset:]:
            dt = r.recv_time - out[onset].recv_time
            frac = max(0.0, 1.0 - dt / 10.0)
            assert r.state.spd_x == pytest.approx(s0.spd_x * frac, abs=1e-9)


class TestBehaviouralAttacks:
    def test_a10_copies_other_senders(self, trace):
        v = _victim(trace)
        others = {r.state for s, recs in _by_sender(trace).items() if s != v for r in recs}
        out = _by_sender(inject(trace, [v], AttackConfig(label="A10")))[v]
        copied = sum(r.state in others for r in out)
        assert copied >= len(out) - 2

    def test_a11_replays_other_stream(self, trace):
        v = _victim(trace)
        src_id = sorted(s for s in _by_sender(trace) if s != v)[0]
        out = _by_sender(inject(trace, [v], AttackConfig(label="A11", replay_source=src_id)))[v]
        src = _by_sender(trace)[src_id]
        assert [r.state for r in out] == [r.state for r in src]
        lags = {round(b.recv_time - a.recv_time, 9) for a, b in zip(src, out)}
        assert len(lags) == 1 and lags.pop() >= 5.0

    def test_a11_missing_source(self, trace):
        v = _victim(trace)
        with pytest.raises(KeyError):
            inject(trace, [v], AttackConfig(label="A11", replay_source="nobody"))

    def test_a12_delay(self, trace):
        v = _victim(trace)
        src = _by_sender(trace)[v]
        out = _by_sender(inject(trace, [v], AttackConfig(label="A12", delay=2.5)))[v]
        assert [b.recv_time - a.recv_time for a, b in zip(src, out)] == pytest.approx([2.5] * len(src))
        assert [a.send_time for a in src] == [b.send_time for b in out]


class TestDos:
    def test_a13_rate(self, trace):
        v = _victim(trace)
        n = len(_by_sender(trace)[v])
        out = _by_sender(inject(trace, [v], AttackConfig(label="A13", dos_multiplier=10)))[v]
        assert abs(len(out) - 10 * n) <= 1
        times = [r.recv_time for r in out]
        assert times == sorted(times)
        assert {r.state for r in out} <= {r.state for r in _by_sender(trace)[v]}

    def test_a14_random_content(self, trace):
        v = _victim(trace)
        out = _by_sender(inject(trace, [v], AttackConfig(label="A14", dos_multiplier=3)))[v]
        assert len({r.state.pos_x for r in out}) == len(out)


class TestSybil:
    def test_a16_grid(self, trace):
        v = _victim(trace)
        benign = set(_by_sender(trace))
        out = inject(trace, [v], AttackConfig(label="A16"))
        senders = _by_sender(out)
        new = set(senders) - benign
        assert len(new) == 9 and v not in senders
        first = _by_sender(trace)[v][0].state
        xs = sorted({senders[g][0].state.pos_x - first.pos_x for g in new})
        assert xs == pytest.approx([-10.0, 0.0, 10.0])
        assert all(len({r.state for r in senders[g]}) == 1 for g in new)

    def test_a17_distinct_sources(self, trace):
        v = _victim(trace)
        out = _by_sender(inject(trace, [v], AttackConfig(label="A17", ghost_count=3)))
        ghosts = [ghost_id(v, k) for k in range(3)]
        firsts = {out[g][0].state for g in ghosts}
        assert len(firsts) == 3

    @pytest.mark.parametrize("label", ["A18", "A19"])
    def test_dos_sybil(self, trace, label):
        v = _victim(trace)
        n = len(_by_sender(trace)[v])
        out = _by_sender(inject(trace, [v], AttackConfig(label=label, ghost_count=2, dos_multiplier=4)))
        for k in range(2):
            assert abs(len(out[ghost_id(v, k)]) - 4 * n) <= 1


class TestInvariants:
    @pytest.mark.parametrize("label", ATTACK_LABELS)
    def test_deterministic_and_benign_untouched(self, trace, label):
        victims = choose_victims(trace, 0.25, seed=3)
        cfg = AttackConfig(label=label, seed=11)
        a = inject(trace, victims, cfg)
        b = inject(trace, victims, cfg)
        assert list(iter_trace_lines(a, True)) == list(iter_trace_lines(b, True))
        benign = set(_by_sender(trace)) - set(victims)
        assert _lines_of(a, benign) == _lines_of(trace, benign)
        injected = [r for r in a.records if not r.is_ego and r.sender_id not in benign]
        assert injected and all(r.label == label for r in injected)
        times = [r.recv_time for r in a.records]
        assert times == sorted(times)

    def test_seed_changes_output(self, trace):
        v = [_victim(trace)]
        a = inject(trace, v, AttackConfig(label="A3", seed=1))
        b = inject(trace, v, AttackConfig(label="A3", seed=2))
        assert list(iter_trace_lines(a)) != list(iter_trace_lines(b))

    def test_empty_victims_warns(self, trace, caplog):
        with caplog.at_level(logging.WARNING):
            out = inject(trace, [], AttackConfig(label="A1"))
        assert out is trace and "empty victim set" in caplog.text

    def test_unknown_victim(self, trace):
        with pytest.raises(KeyError):
            inject(trace, ["ghost"], AttackConfig(label="A1"))


class TestChooseVictims:
    def test_fraction_and_determinism(self, trace):
        ids = set(_by_sender(trace))
        a = choose_victims(trace, 0.5, seed=1)
        assert a == choose_victims(trace, 0.5, seed=1)
        assert len(a) == round(0.5 * len(ids)) and set(a) <= ids

    def test_at_least_one(self, trace):
        assert len(choose_victims(trace, 1e-6, seed=0)) == 1

    def test_min_records(self, trace):
        assert choose_victims(trace, 1.0, seed=0, min_records=10**6) == []


def test_every_label_has_injector():
    assert set(ATTACK_LABELS) == set(AttackLabel) - {AttackLabel.BENIGN}
    assert np.all(np.diff([int(x) for x in ATTACK_LABELS]) == 1)
