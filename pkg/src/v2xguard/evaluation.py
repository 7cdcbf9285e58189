"""Detection metrics, ROC/AUC, attribution tables and report exports."""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .domain import FEATURE_NAMES, NUM_FEATURES, AttackLabel
from .features import NormStats, WindowSet
from .scoring import SenderVerdict, fmt


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def confusion_metrics(verdicts: Iterable[SenderVerdict], tau: float) -> dict:
    """Sender-level metrics with attackers as the positive class."""
    tp = fp = fn = tn = 0
    for v in verdicts:
        if not v.scored:
            continue
        flagged = v.mean_score > tau
        if v.is_attack:
            tp += flagged
            fn += not flagged
        else:
            fp += flagged
            tn += not flagged
    if tp + fn == 0 or fp + tn == 0:
        raise ValueError("confusion metrics need both benign and attack senders")
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return {
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
        "accuracy": (tp + tn) / (tp + fp + fn + tn),
        "precision": precision,
        "recall": recall,
        "f1": _ratio(2 * precision * recall, precision + recall),
        "fpr": fp / (fp + tn),
    }


def roc_auc(benign_scores: Sequence[float], attack_scores: Sequence[float]) -> tuple[float, list[tuple[float, float]]]:
    """AUC and ROC polyline from a sweep over every distinct score.

    Equal scores contribute half, which is what the trapezoid over tied
    thresholds yields.
    """
    b = np.asarray(benign_scores, dtype=np.float64)
    a = np.asarray(attack_scores, dtype=np.float64)
    if b.size == 0 or a.size == 0:
        raise ValueError("ROC needs benign and attack scores")
    scores = np.concatenate([a, b])
    is_attack = np.concatenate([np.ones(a.size), np.zeros(b.size)])
    order = np.argsort(-scores, kind="stable")
    scores, is_attack = scores[order], is_attack[order]
    tps = np.cumsum(is_attack)
    fps = np.cumsum(1 - is_attack)
    last = np.r_[scores[1:] != scores[:-1], True]
    tpr = np.r_[0.0, tps[last] / a.size]
    fpr = np.r_[0.0, fps[last] / b.size]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return auc, [(float(x), float(y)) for x, y in zip(fpr, tpr)]


def attribution_table(verdicts: Iterable[SenderVerdict]) -> dict[AttackLabel, np.ndarray]:
    """Window-weighted top-K selection frequency per label and feature."""
    sums: dict[AttackLabel, np.ndarray] = {}
    counts: dict[AttackLabel, int] = {}
    for v in verdicts:
        if not v.scored:
            continue
        sums.setdefault(v.label, np.zeros(NUM_FEATURES))
        sums[v.label] += np.asarray(v.attribution) * v.windows
        counts[v.label] = counts.get(v.label, 0) + v.windows
    return {label: sums[label] / counts[label] for label in sorted(sums)}


@dataclass
class AttackResult:
    label: AttackLabel
    n_attack: int
    n_benign: int
    metrics: dict
    auc: float
    roc: list[tuple[float, float]]
    attribution: np.ndarray


@dataclass
class EvalReport:
    tau: float
    percentile: float
    benign_fpr: float
    n_benign: int
    benign_attribution: np.ndarray
    attacks: dict[AttackLabel, AttackResult] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "tau": self.tau,
            "percentile": self.percentile,
            "benign_fpr": self.benign_fpr,
            "n_benign": self.n_benign,
            "mean_auc": float(np.mean([r.auc for r in self.attacks.values()])) if self.attacks else math.nan,
            "mean_f1": float(np.mean([r.metrics["f1"] for r in self.attacks.values()])) if self.attacks else math.nan,
            "attacks": {
                lab.code: {
                    "auc": r.auc,
                    **{k: r.metrics[k] for k in ("accuracy", "precision", "recall", "f1")},
                    "n_attack": r.n_attack,
                }
                for lab, r in self.attacks.items()
            },
        }


def evaluate(
    benign: Sequence[SenderVerdict],
    attacks: Mapping[AttackLabel, Sequence[SenderVerdict]],
    tau: float,
    percentile: float = math.nan,
) -> EvalReport:
    """One-vs-benign metrics for each attack label."""
    benign = [v for v in benign if v.scored and not v.is_attack]
    if not benign:
        raise ValueError("no scored benign senders")
    b_scores = [v.mean_score for v in benign]
    report = EvalReport(
        tau=tau,
        percentile=percentile,
        benign_fpr=sum(s > tau for s in b_scores) / len(b_scores),
        n_benign=len(benign),
        benign_attribution=attribution_table(benign)[AttackLabel.BENIGN],
    )
    for label in sorted(attacks):
        att = [v for v in attacks[label] if v.scored and v.label == label]
        if not att:
            continue
        auc, roc = roc_auc(b_scores, [v.mean_score for v in att])
        report.attacks[label] = AttackResult(
            label,
            len(att),
            len(benign),
            confusion_metrics(list(benign) + att, tau),
            auc,
            roc,
            attribution_table(att)[label],
        )
    return report


def metrics_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "n_attack", "n_benign", "accuracy", "precision", "recall", "f1", "auc", "tp", "fp", "fn", "tn"])
    for lab, r in report.attacks.items():
        m = r.metrics
        w.writerow(
            [lab.code, r.n_attack, r.n_benign]
            + [fmt(m[k]) for k in ("accuracy", "precision", "recall", "f1")]
            + [fmt(r.auc), m["tp"], m["fp"], m["fn"], m["tn"]]
        )
    return buf.getvalue()


def roc_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "fpr", "tpr"])
    for lab, r in report.attacks.items():
        for x, y in r.roc:
            w.writerow([lab.code, fmt(x), fmt(y)])
    return buf.getvalue()


def attribution_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", *FEATURE_NAMES])
    w.writerow([AttackLabel.BENIGN.code, *(fmt(float(x)) for x in report.benign_attribution)])
    for lab, r in report.attacks.items():
        w.writerow([lab.code, *(fmt(float(x)) for x in r.attribution)])
    return buf.getvalue()


def residual_scatter_csv(windows: WindowSet, predictions: np.ndarray, norm: NormStats, limit: int | None = None) -> str:
    """Per-feature (true, predicted) pairs, normalized and in physical units."""
    n = len(windows) if limit is None else min(limit, len(windows))
    true_phys = norm.denormalize(windows.targets[:n])
    pred_phys = norm.denormalize(predictions[:n])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sender_id", "feature", "true", "predicted", "true_norm", "predicted_norm"])
    for i in range(n):
        for f, name in enumerate(FEATURE_NAMES):
            w.writerow(
                [
                    windows.sender_ids[i],
                    name,
                    fmt(float(true_phys[i, f])),
                    fmt(float(pred_phys[i, f])),
                    fmt(float(windows.targets[i, f])),
                    fmt(float(predictions[i, f])),
                ]
            )
    return buf.getvalue()
