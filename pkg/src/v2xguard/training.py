"""Benign-only training loop: Huber objective, Adam, clipping, plateau schedule."""

from __future__ import annotations

import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .features import WindowSet
from .model import DecoderModel, ModelConfig
from .numerics import Tape, huber_value

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    huber_delta: float = 1.0
    lr_factor: float = 0.5
    lr_patience: int = 4
    early_stop_patience: int = 8
    min_delta: float = 1e-6
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: TrainReport):
        super().__init__(message)
        self.report = report


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0
    best_val_loss: float = math.inf
    steps: int = 0
    wall_time: float = 0.0

    @property
    def val_losses(self) -> list[float]:
        return [e["val_loss"] for e in self.epochs]

    @property
    def lr_trace(self) -> list[float]:
        return [e["lr"] for e in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)


def huber_objective(pred: np.ndarray, target: np.ndarray, delta: float = 1.0) -> float:
    """Mean over samples of the per-sample mean Huber loss across features."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValueError(f"expected matching (batch, features) arrays, got {pred.shape} and {target.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(target))):
        raise ValueError("non-finite prediction or target")
    per_sample = huber_value(target - pred, delta).mean(axis=1)
    return float(per_sample.mean())


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads, max_norm: float):
    """Scale all gradients by min(1, max_norm / ||g||_2). Returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return OrderedDict((k, (g * scale).astype(g.dtype)) for k, g in grads.items()), norm


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v, dtype=np.float32) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float32) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr: float) -> None:
        """In-place update; parameters with zero gradient history stay put."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            params[k] -= update.astype(params[k].dtype)


class PlateauSchedule:
    """Patience bookkeeping shared by LR reduction and early stopping.

    An epoch improves when val < best - min_delta. Both counters reset on
    improvement; an LR reduction resets only its own counter.
    """

    def __init__(self, lr: float, factor: float, lr_patience: int, stop_patience: int, min_delta: float):
        self.lr = lr
        self.factor = factor
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.min_delta = min_delta
        self.best = math.inf
        self.lr_wait = 0
        self.stop_wait = 0

    def update(self, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop); adjusts ``lr`` in place."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.lr_wait = 0
            self.stop_wait = 0
            return True, False
        self.lr_wait += 1
        self.stop_wait += 1
        if self.stop_wait >= self.stop_patience:
            return False, True
        if self.lr_wait >= self.lr_patience:
            self.lr *= self.factor
            self.lr_wait = 0
        return False, False


def evaluate_loss(model: DecoderModel, weights, windows: WindowSet, delta: float, batch_size: int = 2048) -> float:
    if len(windows) == 0:
        raise ValueError("no windows to evaluate")
    pred = model.predict(weights, windows.inputs.astype(np.float32), batch_size)
    return huber_objective(pred, windows.targets, delta)


def train_step(model: DecoderModel, weights, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, step: int, train=True):
    """Forward + backward on one batch. Returns (loss, grads)."""
    tape = Tape(np.float32)
    p = model.bind(tape, weights)
    pred = model.forward(tape, p, tape.const(x), train=train, seed=cfg.seed, step=step)
    loss = tape.mean(tape.huber(pred, tape.const(y), cfg.huber_delta))
    tape.backward(loss)
    grads = OrderedDict((k, t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in p.items())
    return float(loss.data), grads


def train(
    model_config: ModelConfig,
    weights,
    train_windows: WindowSet,
    val_windows: WindowSet,
    cfg: TrainConfig,
    max_steps: int | None = None,
) -> tuple[OrderedDict, TrainReport]:
    """Optimize ``weights`` (copied) and return the best-validation weights."""
    overlap = set(train_windows.sender_ids.tolist()) & set(val_windows.sender_ids.tolist())
    if overlap:
        raise AssertionError(f"train/val splits share senders: {sorted(overlap)[:5]}")
    if len(train_windows) == 0:
        raise ValueError("no training windows")

    model = DecoderModel(model_config)
    weights = OrderedDict((k, np.array(v, dtype=np.float32)) for k, v in weights.items())
    best = OrderedDict((k, v.copy()) for k, v in weights.items())
    opt = Adam(weights, cfg.beta1, cfg.beta2, cfg.eps)
    sched = PlateauSchedule(cfg.lr, cfg.lr_factor, cfg.lr_patience, cfg.early_stop_patience, cfg.min_delta)
    report = TrainReport()
    x_all = train_windows.inputs.astype(np.float32)
    y_all = train_windows.targets.astype(np.float32)
    n = len(train_windows)
    step = 0
    start = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        lr = sched.lr
        losses, sizes = [], []
        for b in range(0, n, cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            loss, grads = train_step(model, weights, x_all[idx], y_all[idx], cfg, step)
            if not math.isfinite(loss):
                report.stop_reason = "diverged"
                raise TrainingDiverged(f"non-finite training loss at step {step}", report)
            grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            opt.step(weights, grads, lr)
            losses.append(loss)
            sizes.append(len(idx))
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        train_loss = float(np.average(losses, weights=sizes))
        val_loss = evaluate_loss(model, weights, val_windows, cfg.huber_delta) if len(val_windows) else train_loss
        report.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        report.steps = step
        logger.info("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss, lr)
        if not math.isfinite(val_loss):
            report.stop_reason = "diverged"
            report.wall_time = time.perf_counter() - start
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", report)
        improved, stop = sched.update(val_loss)
        if improved:
            best = OrderedDict((k, v.copy()) for k, v in weights.items())
            report.best_epoch = epoch
            report.best_val_loss = val_loss
        if stop:
            report.stop_reason = "early_stop"
            break
        if max_steps is not None and step >= max_steps:
            report.stop_reason = "max_steps"
            break
    else:
        report.stop_reason = "max_epochs"
    report.wall_time = time.perf_counter() - start
    return best, report
