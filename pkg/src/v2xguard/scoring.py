"""Residual-based anomaly scores, sender verdicts and threshold calibration."""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .domain import FEATURE_NAMES, NUM_FEATURES, AttackLabel
from .features import WindowSet
from .model import DecoderModel

TOP_K = 3
MAE_FLOOR = 1e-8
DEFAULT_PERCENTILE = 98.0
MIN_CALIBRATION_SENDERS = 10


def residuals(model: DecoderModel, weights, windows: WindowSet, batch_size: int = 2048) -> np.ndarray:
    """Per-feature absolute prediction errors in normalized units, shape (N, 8)."""
    if len(windows) == 0:
        return np.zeros((0, NUM_FEATURES))
    pred = model.predict(weights, windows.inputs.astype(np.float32), batch_size)
    return np.abs(windows.targets - pred)


@dataclass(frozen=True)
class BenignMae:
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != (NUM_FEATURES,) or not np.all(self.values >= MAE_FLOOR):
            raise ValueError("benign MAE needs 8 entries >= floor")

    def to_list(self) -> list[float]:
        return [float(v) for v in self.values]


def fit_benign_mae(errors: np.ndarray) -> BenignMae:
    """Column means of benign residuals, floored at MAE_FLOOR."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 2 or errors.shape[0] == 0:
        raise ValueError("need at least one benign window to fit the MAE")
    mae = errors.mean(axis=0)
    return BenignMae(np.maximum(mae, MAE_FLOOR))


@dataclass(frozen=True)
class WindowScore:
    score: float
    topk_features: tuple[int, ...]


def window_scores(errors: np.ndarray, mae: BenignMae, k: int = TOP_K) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized mean-of-top-K normalized residuals.

    Returns (scores (N,), selected feature indices (N, K)). Ties are broken
    toward the lower feature index.
    """
    if not 1 <= k <= NUM_FEATURES:
        raise ValueError(f"K must be in [1, {NUM_FEATURES}], got {k}")
    norm = np.asarray(errors, dtype=np.float64) / mae.values
    order = np.argsort(-norm, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(norm, order, axis=1)
    return top.mean(axis=1), order


def window_score(errors: Sequence[float], mae: BenignMae, k: int = TOP_K) -> WindowScore:
    scores, idx = window_scores(np.asarray(errors, dtype=np.float64)[None, :], mae, k)
    return WindowScore(float(scores[0]), tuple(int(i) for i in idx[0]))


@dataclass(frozen=True)
class SenderVerdict:
    sender_id: str
    label: AttackLabel
    windows: int
    mean_score: float
    flagged: bool
    attribution: tuple[float, ...]

    @property
    def scored(self) -> bool:
        return self.windows > 0

    @property
    def is_attack(self) -> bool:
        return self.label != AttackLabel.BENIGN


def sender_verdict(
    sender_id: str,
    scores: Sequence[float],
    topk: np.ndarray | None,
    tau: float,
    label: AttackLabel = AttackLabel.BENIGN,
) -> SenderVerdict:
    """Average window scores; flag strictly above ``tau``. No windows -> unscored."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return SenderVerdict(sender_id, label, 0, math.nan, False, (0.0,) * NUM_FEATURES)
    mean = float(scores.mean())
    hist = np.zeros(NUM_FEATURES)
    if topk is not None and len(topk):
        counts = np.bincount(np.asarray(topk).ravel(), minlength=NUM_FEATURES)
        hist = counts / scores.size
    return SenderVerdict(sender_id, label, int(scores.size), mean, mean > tau, tuple(float(h) for h in hist))


def score_senders(
    windows: WindowSet,
    errors: np.ndarray,
    mae: BenignMae,
    tau: float,
    k: int = TOP_K,
) -> list[SenderVerdict]:
    """One verdict per sender present in ``windows``, sorted by sender id."""
    scores, topk = window_scores(errors, mae, k)
    ids = windows.sender_ids
    verdicts = []
    if len(ids) == 0:
        return verdicts
    order = np.argsort(ids.astype(str), kind="stable")
    sorted_ids = ids[order].astype(str)
    bounds = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1], True])
    for a, b in zip(bounds[:-1], bounds[1:]):
        sel = order[a:b]
        label = AttackLabel(int(windows.labels[sel[0]]))
        verdicts.append(sender_verdict(str(sorted_ids[a]), scores[sel], topk[sel], tau, label))
    return verdicts


def calibrate_threshold(sender_scores: Iterable[float], percentile: float = DEFAULT_PERCENTILE) -> float:
    """Empirical percentile with linear interpolation between order statistics."""
    scores = np.asarray([s for s in sender_scores if not math.isnan(s)], dtype=np.float64)
    if scores.size < MIN_CALIBRATION_SENDERS:
        raise ValueError(f"need at least {MIN_CALIBRATION_SENDERS} calibration senders, got {scores.size}")
    if not 0.0 <= percentile <= 100.0:
        raise ValueError("percentile must be in [0, 100]")
    return float(np.percentile(scores, percentile, method="linear"))


def flag_rate(verdicts: Iterable[SenderVerdict], tau: float) -> float:
    scored = [v for v in verdicts if v.scored]
    if not scored:
        return math.nan
    return sum(v.mean_score > tau for v in scored) / len(scored)


def fmt(x: float) -> str:
    """Six significant digits, locale independent."""
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.6g}"


VERDICT_COLUMNS = ["sender_id", "label", "windows", "mean_score", "flagged"] + [f"top_{n}" for n in FEATURE_NAMES]


def verdicts_to_csv(verdicts: Iterable[SenderVerdict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(VERDICT_COLUMNS)
    for v in verdicts:
        w.writerow(
            [v.sender_id, v.label.code, v.windows, fmt(v.mean_score), int(v.flagged)] + [fmt(a) for a in v.attribution]
        )
    return buf.getvalue()


def verdicts_from_csv(text: str, tau: float | None = None) -> list[SenderVerdict]:
    rows = csv.DictReader(io.StringIO(text))
    out = []
    for r in rows:
        mean = float(r["mean_score"])
        flagged = bool(int(r["flagged"])) if tau is None else mean > tau
        out.append(
            SenderVerdict(
                r["sender_id"],
                AttackLabel.parse(r["label"]),
                int(r["windows"]),
                mean,
                flagged,
                tuple(float(r[f"top_{n}"]) for n in FEATURE_NAMES),
            )
        )
    return out
