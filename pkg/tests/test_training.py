from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np
import pytest

from v2xguard.features import WindowSet
from v2xguard.model import DecoderModel, ModelConfig, init_weights
from v2xguard.numerics import huber_value
from v2xguard.training import (
    Adam,
    PlateauSchedule,
    TrainConfig,
    TrainingDiverged,
    clip_by_global_norm,
    evaluate_loss,
    global_norm,
    huber_objective,
    train,
    train_step,
)

SMALL = ModelConfig(d_model=16, heads=2, key_dim=8, ffn_dim=32, blocks=1, dropout=0.0)


def _windows(rng, n, senders, shift=0.0):
    x = rng.normal(size=(n, 10, 8))
    # next step is a smooth function of the window, so a tiny model can learn it
    y = 0.8 * x[:, -1] + 0.2 * x[:, -2] + shift
    ids = np.array([senders[i % len(senders)] for i in range(n)])
    origin = np.zeros((n, 2), dtype=np.int64)
    return WindowSet(x, y, ids, np.zeros(n, dtype=np.int64), origin)


def scalar_objective(pred, target, delta):
    total = 0.0
    for p_row, t_row in zip(pred, target):
        row = 0.0
        for p, t in zip(p_row, t_row):
            r = abs(t - p)
            row += 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)
        total += row / len(p_row)
    return total / len(pred)


class TestObjective:
    def test_zero_residual(self):
        x = np.ones((4, 8))
        assert huber_objective(x, x) == 0.0

    def test_linear_branch(self):
        assert huber_objective(np.zeros((1, 8)), np.full((1, 8), 2.0)) == pytest.approx(1.5)

    def test_matches_scalar_loop(self, rng):
        pred = rng.normal(0, 2, (200, 8))
        target = rng.normal(0, 2, (200, 8))
        assert huber_objective(pred, target) == pytest.approx(scalar_objective(pred, target, 1.0), abs=1e-7)

    def test_non_finite_rejected(self):
        bad = np.zeros((2, 8))
        bad[1, 3] = np.nan
        with pytest.raises(ValueError):
            huber_objective(bad, np.zeros((2, 8)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            huber_objective(np.zeros((2, 8)), np.zeros((2, 7)))


class TestClip:
    def _grads(self, norm):
        g = np.array([3.0, 4.0], dtype=np.float32) * (norm / 5.0)
        return OrderedDict(a=g[:1].copy(), b=g[1:].copy())

    def test_scales_large_norm(self):
        grads, pre = clip_by_global_norm(self._grads(5.0), 1.0)
        assert pre == pytest.approx(5.0)
        assert global_norm(grads) == pytest.approx(1.0, rel=1e-6)
        assert grads["a"][0] == pytest.approx(0.6) and grads["b"][0] == pytest.approx(0.8)

    def test_small_norm_unchanged(self):
        src = self._grads(0.5)
        grads, pre = clip_by_global_norm(src, 1.0)
        assert pre == pytest.approx(0.5)
        assert all(np.array_equal(grads[k], src[k]) for k in src)

    def test_never_increases_and_keeps_direction(self, rng):
        for _ in range(50):
            src = OrderedDict(a=rng.normal(0, rng.uniform(0.01, 5), (3, 4)), b=rng.normal(size=7))
            grads, _ = clip_by_global_norm(src, 1.0)
            assert global_norm(grads) <= global_norm(src) + 1e-12
            flat_src = np.concatenate([v.ravel() for v in src.values()])
            flat = np.concatenate([v.ravel() for v in grads.values()])
            cos = flat @ flat_src / (np.linalg.norm(flat) * np.linalg.norm(flat_src))
            assert cos == pytest.approx(1.0, abs=1e-9)


class TestAdam:
    def test_zero_gradient_leaves_params(self, rng):
        params = {"w": rng.normal(size=(4, 4)).astype(np.float32)}
        before = params["w"].copy()
        opt = Adam(params)
        for _ in range(5):
            opt.step(params, {"w": np.zeros((4, 4), dtype=np.float32)}, 1e-3)
        assert np.array_equal(params["w"], before)

    def test_first_step_moves_by_lr(self):
        # bias correction makes the first update lr * sign(g)
        params = {"w": np.zeros(3, dtype=np.float32)}
        Adam(params).step(params, {"w": np.array([2.0, -0.5, 1e-3], dtype=np.float32)}, 0.01)
        np.testing.assert_allclose(params["w"], [-0.01, 0.01, -0.01 * 1e-3 / (1e-3 + 1e-8)], rtol=1e-4)

    def test_minimizes_quadratic(self):
        params = {"w": np.array([5.0, -3.0], dtype=np.float32)}
        opt = Adam(params)
        for _ in range(2000):
            opt.step(params, {"w": 2 * params["w"]}, 0.05)
        assert np.max(np.abs(params["w"])) < 0.05


class TestPlateauSchedule:
    def _run(self, losses):
        sched = PlateauSchedule(1.0, 0.5, 4, 8, 1e-6)
        lrs, stopped = [], None
        for epoch, v in enumerate(losses, 1):
            lrs.append(sched.lr)
            _, stop = sched.update(v)
            if stop:
                stopped = epoch
                break
        return lrs, sched.lr, stopped

    def test_first_halving_after_epoch_six(self):
        lrs, _, _ = self._run([1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9])
        # lrs[i] is the rate used during epoch i+1
        assert lrs[:6] == [1.0] * 6
        assert lrs[6] == 0.5

    def test_stop_after_eight_stagnant(self):
        lrs, _, stopped = self._run([1.0, 0.9] + [0.9] * 20)
        assert stopped == 10
        assert lrs[-1] == 0.5

    def test_improvement_resets(self):
        losses = [1.0, 0.9, 0.9, 0.9, 0.8, 0.8, 0.8, 0.8, 0.8]
        lrs, lr, stopped = self._run(losses)
        assert stopped is None and lr == 0.5 and lrs[-1] == 1.0

    def test_min_delta(self):
        sched = PlateauSchedule(1.0, 0.5, 4, 8, 1e-6)
        assert sched.update(1.0)[0]
        assert not sched.update(1.0 - 5e-7)[0]
        assert sched.update(1.0 - 2e-6)[0]


class TestTrain:
    def test_sender_overlap_rejected(self, rng):
        a = _windows(rng, 20, ["s1", "s2"])
        b = _windows(rng, 10, ["s2", "s3"])
        with pytest.raises(AssertionError):
            train(SMALL, init_weights(SMALL), a, b, TrainConfig(max_epochs=1))

    def test_empty_training_set(self, rng):
        empty = WindowSet.concat([])
        with pytest.raises(ValueError):
            train(SMALL, init_weights(SMALL), empty, _windows(rng, 5, ["v"]), TrainConfig(max_epochs=1))

    def test_learns_and_reports(self, rng):
        tr = _windows(rng, 600, [f"t{i}" for i in range(12)])
        va = _windows(rng, 200, [f"v{i}" for i in range(4)])
        cfg = TrainConfig(batch_size=64, lr=3e-3, max_epochs=6, seed=1)
        best, report = train(SMALL, init_weights(SMALL, 1), tr, va, cfg)
        assert len(report.epochs) == 6 and report.stop_reason == "max_epochs"
        assert report.val_losses[-1] < 0.5 * report.val_losses[0]
        assert report.best_val_loss == min(report.val_losses)
        assert report.steps == 6 * math.ceil(600 / 64)
        assert report.lr_trace == [3e-3] * 6

    def test_returns_best_weights(self, rng):
        tr = _windows(rng, 300, ["a", "b", "c"])
        va = _windows(rng, 100, ["d"])
        best, report = train(SMALL, init_weights(SMALL, 2), tr, va, TrainConfig(batch_size=50, lr=1e-2, max_epochs=5))
        assert evaluate_loss(DecoderModel(SMALL), best, va, 1.0) == pytest.approx(report.best_val_loss, rel=1e-9)

    def test_deterministic_without_dropout(self, rng):
        tr = _windows(rng, 256, ["a", "b", "c", "d"])
        va = _windows(rng, 64, ["e"])
        cfg = TrainConfig(batch_size=32, max_epochs=2, seed=5)
        w1, r1 = train(SMALL, init_weights(SMALL, 3), tr, va, cfg)
        w2, r2 = train(SMALL, init_weights(SMALL, 3), tr, va, cfg)
        assert all(np.array_equal(w1[k], w2[k]) for k in w1)
        assert r1.val_losses == r2.val_losses

    def test_max_steps(self, rng):
        tr = _windows(rng, 256, ["a", "b"])
        va = _windows(rng, 32, ["c"])
        _, report = train(SMALL, init_weights(SMALL), tr, va, TrainConfig(batch_size=16, max_epochs=3), max_steps=5)
        assert report.steps == 5 and report.stop_reason == "max_steps"

    def test_divergence_aborts(self, rng):
        tr = _windows(rng, 64, ["a", "b"])
        va = _windows(rng, 16, ["c"])
        w = init_weights(SMALL)
        w["head.b"][:] = np.nan
        with pytest.raises(TrainingDiverged) as err:
            train(SMALL, w, tr, va, TrainConfig(batch_size=16, max_epochs=2))
        assert err.value.report.stop_reason == "diverged"

    def test_single_batch_overfit_small_model(self, rng):
        ws = _windows(rng, 32, ["a"])
        ws = WindowSet(ws.inputs, rng.normal(size=(32, 8)), ws.sender_ids, ws.labels, ws.origin)
        model = DecoderModel(SMALL)
        w = init_weights(SMALL, 0)
        cfg = TrainConfig(lr=1e-2)
        opt = Adam(w)
        x, y = ws.inputs.astype(np.float32), ws.targets.astype(np.float32)
        for step in range(500):
            _, grads = train_step(model, w, x, y, cfg, step)
            grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            opt.step(w, grads, cfg.lr)
        assert evaluate_loss(model, w, ws, 1.0) < 1e-3


def test_huber_value_matches_objective_per_sample(rng):
    r = rng.normal(0, 2, (5, 8))
    assert huber_objective(np.zeros_like(r), r) == pytest.approx(huber_value(r).mean())
