from __future__ import annotations

import numpy as np
import pytest
from helpers import cam, ego, make_state
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from v2xguard.domain import AttackLabel, RelativeFeatureVector, SenderSequence
from v2xguard.features import (
    NormStats,
    SplitStats,
    WindowSet,
    build_sequences,
    extract_features,
    fit_norm_stats,
    make_windows,
    segment_array,
    split_by_sender,
    split_on_gaps,
    windows_for,
)
from v2xguard.ingestion import AlignedObservation, TraceFile, align, group_by_sender


def _obs(times, sender="a"):
    return [AlignedObservation(cam(t, sender, make_state(x=t)), ego(t)) for t in times]


def _seq(arrays_, sender="s", label=AttackLabel.BENIGN, t0=0.0):
    segs = []
    t = t0
    for arr in arrays_:
        seg = []
        for row in np.asarray(arr, dtype=float):
            seg.append((t, RelativeFeatureVector(tuple(float(v) for v in row), t)))
            t += 1.0
        t += 10.0
        segs.append(tuple(seg))
    return SenderSequence(sender, label, tuple(segs))


class TestExtract:
    def test_subtraction(self):
        obs = AlignedObservation(cam(1.0, state=make_state(10, 20)), ego(1.0, make_state(4, 5)))
        assert extract_features(obs).values == (6, 15, 0, 0, 0, 0, 0, 0)

    def test_identity(self):
        s = make_state(3, 4, 5, 6, 0.1, 0.2, 1.0)
        assert extract_features(AlignedObservation(cam(1.0, state=s), ego(0.5, s))).values == (0.0,) * 8

    def test_heading_delta(self):
        obs = AlignedObservation(cam(1.0, state=make_state(heading=np.pi / 2)), ego(1.0, make_state(heading=0.0)))
        vals = extract_features(obs).values
        assert vals[6] == pytest.approx(-1.0) and vals[7] == pytest.approx(1.0)

    def test_timestamp_is_cam_time(self):
        obs = AlignedObservation(cam(7.25), ego(7.0))
        assert extract_features(obs).timestamp == 7.25


class TestSplitOnGaps:
    def test_one_gap_drops_short_segment(self):
        times = list(range(10)) + list(range(12, 28))
        stats = SplitStats()
        seq = split_on_gaps(_obs(times), 2.0, 15, stats)
        assert [len(s) for s in seq.segments] == [16]
        assert (stats.segments_kept, stats.segments_dropped) == (1, 1)

    def test_exact_minimum(self):
        assert len(split_on_gaps(_obs(range(15))).segments) == 1

    def test_below_minimum(self):
        stats = SplitStats()
        assert split_on_gaps(_obs(range(14)), stats=stats).segments == ()
        assert stats.segments_dropped == 1

    def test_gap_equal_threshold_does_not_split(self):
        times = [0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22, 24, 26, 28]
        assert len(split_on_gaps(_obs(times)).segments[0]) == 15

    def test_label_majority_of_attack_records(self):
        obs = _obs(range(15))
        obs = [AlignedObservation(cam(o.cam.recv_time), o.ego) for o in obs]
        from dataclasses import replace

        obs[3] = AlignedObservation(replace(obs[3].cam, label=AttackLabel.DOS), obs[3].ego)
        assert split_on_gaps(obs).label == AttackLabel.DOS

    def test_build_sequences_sorted_and_filtered(self):
        recs = [ego(float(t)) for t in range(30)]
        recs += [cam(t + 0.01, "b") for t in range(20)] + [cam(t + 0.01, "a") for t in range(20)]
        recs += [cam(t + 0.01, "c") for t in range(5)]
        groups = group_by_sender(align(TraceFile(None, tuple(recs)))[0])
        assert [s.sender_id for s in build_sequences(groups)] == ["a", "b"]


class TestNormStats:
    def test_two_values(self):
        x = np.tile([[1.0], [3.0]], (1, 8))
        stats = fit_norm_stats([_seq([x])])
        np.testing.assert_allclose(stats.mean, 2.0)
        np.testing.assert_allclose(stats.std, 1.0)

    def test_constant_feature(self):
        x = np.zeros((5, 8))
        x[:, 1] = np.arange(5)
        stats = fit_norm_stats([_seq([x])])
        assert stats.std[0] == 1.0 and stats.std[1] != 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_norm_stats([])

    def test_matches_two_pass_oracle(self, rng):
        seqs = []
        for i in range(12):
            segs = [rng.normal(rng.normal(0, 100, 8), rng.uniform(0.1, 50, 8), (rng.integers(2, 40), 8))
                    for _ in range(rng.integers(1, 4))]
            seqs.append(_seq(segs, f"s{i}"))
        stats = fit_norm_stats(seqs)
        allx = np.concatenate([segment_array(seg) for s in seqs for seg in s.segments])
        mean = allx.sum(axis=0) / len(allx)
        var = ((allx - mean) ** 2).sum(axis=0) / len(allx)
        np.testing.assert_allclose(stats.mean, mean, rtol=0, atol=1e-9)
        np.testing.assert_allclose(stats.std, np.sqrt(var), rtol=1e-12, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (6, 8), elements=st.floats(-1e4, 1e4)))
    def test_round_trip(self, x):
        stats = NormStats(np.linspace(-3, 3, 8), np.linspace(0.5, 40, 8))
        np.testing.assert_allclose(stats.denormalize(stats.normalize(x)), x, atol=1e-9)

    def test_dict_round_trip(self):
        stats = NormStats(np.arange(8.0) + 0.1, np.arange(8.0) + 1.3)
        back = NormStats.from_dict(stats.to_dict())
        assert np.array_equal(back.mean, stats.mean) and np.array_equal(back.std, stats.std)


class TestWindows:
    IDENTITY = NormStats(np.zeros(8), np.ones(8))

    @pytest.mark.parametrize("length,expected", [(15, 5), (11, 1), (10, 0), (30, 20)])
    def test_window_count(self, length, expected):
        assert len(make_windows(_seq([np.zeros((length, 8))]), self.IDENTITY)) == expected

    def test_mean_value_normalizes_to_zero(self):
        stats = NormStats(np.full(8, 5.0), np.full(8, 2.0))
        w = make_windows(_seq([np.full((12, 8), 5.0)]), stats)
        assert np.all(w.inputs == 0.0) and np.all(w.targets == 0.0)

    def test_windows_do_not_cross_segments(self):
        a = np.arange(15 * 8, dtype=float).reshape(15, 8)
        b = -np.arange(12 * 8, dtype=float).reshape(12, 8)
        w = make_windows(_seq([a, b]), self.IDENTITY)
        assert len(w) == 5 + 2
        for i in range(len(w)):
            inp = w.inputs[i]
            assert np.all(inp >= 0) or np.all(inp <= 0)

    def test_reconstruction_from_raw(self, rng):
        stats = NormStats(rng.normal(size=8), rng.uniform(0.5, 2.0, 8))
        seq = _seq([rng.normal(size=(n, 8)) for n in (17, 25, 15)], label=AttackLabel.CONST_SPEED)
        w = make_windows(seq, stats)
        for i, (seg_idx, start) in enumerate(w.origin):
            raw = segment_array(seq.segments[seg_idx])
            assert np.array_equal(w.inputs[i], (raw[start : start + 10] - stats.mean) / stats.std)
            assert np.array_equal(w.targets[i], (raw[start + 10] - stats.mean) / stats.std)
        assert set(w.labels) == {int(AttackLabel.CONST_SPEED)}
        assert set(w.sender_ids) == {"s"}

    def test_iteration_and_subset(self):
        w = windows_for([_seq([np.zeros((13, 8))], "a"), _seq([np.ones((12, 8))], "b")], self.IDENTITY)
        assert [x.sender_id for x in w] == ["a", "a", "a", "b", "b"]
        sub = w.subset(w.sender_ids == "b")
        assert len(sub) == 2 and np.all(sub.targets == 1.0)
        assert len(WindowSet.concat([])) == 0


class TestSplitBySender:
    def test_hundred(self):
        s = split_by_sender([f"v{i}" for i in range(100)], seed=3)
        assert [len(s[k]) for k in ("train", "val", "test")] == [70, 15, 15]

    def test_ten(self):
        s = split_by_sender([f"v{i}" for i in range(10)], seed=3)
        assert [len(s[k]) for k in ("train", "val", "test")] in ([7, 1, 2], [7, 2, 1])

    def test_deterministic_and_disjoint(self):
        ids = [f"v{i}" for i in range(57)]
        a = split_by_sender(ids, seed=9)
        assert a == split_by_sender(list(reversed(ids)), seed=9)
        assert a != split_by_sender(ids, seed=10)
        together = a["train"] + a["val"] + a["test"]
        assert sorted(together) == sorted(ids) and len(set(together)) == len(ids)

    def test_too_few(self):
        with pytest.raises(ValueError):
            split_by_sender(["a", "b"])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 400), st.integers(0, 2**31))
    def test_ratios_within_one(self, n, seed):
        s = split_by_sender([str(i) for i in range(n)], seed=seed)
        for k, r in (("train", 0.7), ("val", 0.15), ("test", 0.15)):
            assert abs(len(s[k]) - r * n) <= 1.0 + 1e-9 or n < 7
