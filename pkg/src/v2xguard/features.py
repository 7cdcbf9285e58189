"""Relative features, gap splitting, z-score statistics and sliding windows."""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .domain import NUM_FEATURES, AttackLabel, RelativeFeatureVector, SenderSequence
from .ingestion import DEFAULT_MAX_GAP, AlignedObservation

WINDOW = 10
MIN_SEQUENCE_LENGTH = 15
DEGENERATE_STD = 1e-8


def extract_features(obs: AlignedObservation) -> RelativeFeatureVector:
    """CAM minus ego, component-wise. Raises ValueError on non-finite output."""
    cam = obs.cam.state.as_tuple()
    ego = obs.ego.state.as_tuple()
    return RelativeFeatureVector(tuple(c - e for c, e in zip(cam, ego)), obs.cam.recv_time)


@dataclass
class SplitStats:
    segments_kept: int = 0
    segments_dropped: int = 0
    rejected_observations: int = 0


def sender_label(observations: Iterable[AlignedObservation]) -> AttackLabel:
    counts = Counter(o.cam.label for o in observations if o.cam.label != AttackLabel.BENIGN)
    if not counts:
        return AttackLabel.BENIGN
    return counts.most_common(1)[0][0]


def split_on_gaps(
    observations: Sequence[AlignedObservation],
    gap_threshold: float = DEFAULT_MAX_GAP,
    min_length: int = MIN_SEQUENCE_LENGTH,
    stats: SplitStats | None = None,
) -> SenderSequence:
    """Cut a time-sorted sender history wherever consecutive messages are more than
    ``gap_threshold`` apart; drop segments shorter than ``min_length``."""
    stats = stats if stats is not None else SplitStats()
    if not observations:
        raise ValueError("no observations")
    sender = observations[0].cam.sender_id
    runs: list[list[tuple[float, RelativeFeatureVector]]] = []
    prev_t = -math.inf
    for obs in observations:
        try:
            vec = extract_features(obs)
        except ValueError:
            stats.rejected_observations += 1
            continue
        t = vec.timestamp
        if t <= prev_t:
            raise ValueError(f"observations for {sender} are not strictly time-sorted")
        if not runs or t - prev_t > gap_threshold:
            runs.append([])
        runs[-1].append((t, vec))
        prev_t = t
    kept = []
    for run in runs:
        if len(run) >= min_length:
            kept.append(tuple(run))
            stats.segments_kept += 1
        else:
            stats.segments_dropped += 1
    return SenderSequence(sender, sender_label(observations), tuple(kept))


def build_sequences(
    groups: dict[str, list[AlignedObservation]],
    gap_threshold: float = DEFAULT_MAX_GAP,
    min_length: int = MIN_SEQUENCE_LENGTH,
    stats: SplitStats | None = None,
) -> list[SenderSequence]:
    """Sequences for every sender that keeps at least one segment, ordered by sender id."""
    out = []
    for sender in sorted(groups):
        seq = split_on_gaps(groups[sender], gap_threshold, min_length, stats)
        if seq.segments:
            out.append(seq)
    return out


def segment_array(segment) -> np.ndarray:
    return np.array([vec.values for _, vec in segment], dtype=np.float64)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        if self.mean.shape != (NUM_FEATURES,) or self.std.shape != (NUM_FEATURES,):
            raise ValueError("NormStats needs 8 means and 8 stds")
        if not np.all(self.std > 0):
            raise ValueError("std must be positive")

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_norm_stats(sequences: Iterable[SenderSequence]) -> NormStats:
    """Population mean/std over every feature vector of every segment (single pass,
    Welford/Chan merging per segment)."""
    count = 0
    mean = np.zeros(NUM_FEATURES)
    m2 = np.zeros(NUM_FEATURES)
    for seq in sequences:
        for seg in seq.segments:
            x = segment_array(seg)
            n_b = x.shape[0]
            mean_b = x.mean(axis=0)
            m2_b = ((x - mean_b) ** 2).sum(axis=0)
            delta = mean_b - mean
            total = count + n_b
            mean = mean + delta * (n_b / total)
            m2 = m2 + m2_b + delta**2 * (count * n_b / total)
            count = total
    if count < 2:
        raise ValueError("need at least 2 feature vectors to fit normalization statistics")
    std = np.sqrt(m2 / count)
    std = np.where(std < DEGENERATE_STD, 1.0, std)
    return NormStats(mean, std)


@dataclass(frozen=True)
class TrainingWindow:
    input: np.ndarray  # (WINDOW, 8), normalized
    target: np.ndarray  # (8,), normalized
    sender_id: str
    label: AttackLabel


@dataclass
class WindowSet:
    """Array-backed collection of windows.

    ``inputs`` is (N, WINDOW, 8), ``targets`` (N, 8), both z-scored.
    ``origin`` holds (segment index, start offset) per window for traceability.
    """

    inputs: np.ndarray
    targets: np.ndarray
    sender_ids: np.ndarray
    labels: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def __iter__(self):
        for i in range(len(self)):
            yield TrainingWindow(
                self.inputs[i], self.targets[i], str(self.sender_ids[i]), AttackLabel(int(self.labels[i]))
            )

    def subset(self, mask_or_idx) -> WindowSet:
        return WindowSet(
            self.inputs[mask_or_idx],
            self.targets[mask_or_idx],
            self.sender_ids[mask_or_idx],
            self.labels[mask_or_idx],
            self.origin[mask_or_idx],
        )

    @classmethod
    def empty(cls, window: int = WINDOW) -> WindowSet:
        return cls(
            np.zeros((0, window, NUM_FEATURES)),
            np.zeros((0, NUM_FEATURES)),
            np.array([], dtype=object),
            np.array([], dtype=np.int64),
            np.zeros((0, 2), dtype=np.int64),
        )

    @classmethod
    def concat(cls, parts: Sequence[WindowSet]) -> WindowSet:
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.targets for p in parts]),
            np.concatenate([p.sender_ids for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.origin for p in parts]),
        )


def make_windows(seq: SenderSequence, stats: NormStats, window: int = WINDOW) -> WindowSet:
    """All stride-1 windows of ``window`` inputs plus the following target, per segment."""
    inputs, targets, origin = [], [], []
    for seg_idx, seg in enumerate(seq.segments):
        z = stats.normalize(segment_array(seg))
        n_win = max(0, z.shape[0] - window)
        if n_win == 0:
            continue
        idx = np.arange(n_win)[:, None] + np.arange(window)[None, :]
        inputs.append(z[idx])
        targets.append(z[window : window + n_win])
        origin.append(np.stack([np.full(n_win, seg_idx), np.arange(n_win)], axis=1))
    if not inputs:
        return WindowSet.empty(window)
    n = sum(len(t) for t in targets)
    return WindowSet(
        np.concatenate(inputs),
        np.concatenate(targets),
        np.full(n, seq.sender_id, dtype=object),
        np.full(n, int(seq.label), dtype=np.int64),
        np.concatenate(origin).astype(np.int64),
    )


def windows_for(sequences: Iterable[SenderSequence], stats: NormStats, window: int = WINDOW) -> WindowSet:
    return WindowSet.concat([make_windows(s, stats, window) for s in sequences])


def split_by_sender(
    sender_ids: Iterable[str],
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> dict[str, list[str]]:
    """Seeded shuffle of unique sender ids into train/val/test."""
    ids = sorted(set(sender_ids))
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 senders to split, got {n}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"bad split ratios {ratios}")
    total = sum(ratios)
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(n)]
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    n_train = min(max(n_train, 1), n - 2)
    n_val = min(max(n_val, 1), n - n_train - 1)
    splits = {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }
    assert_disjoint(splits)
    return splits


def assert_disjoint(splits: dict[str, list[str]]) -> None:
    seen: dict[str, str] = {}
    for name, ids in splits.items():
        for sid in ids:
            if sid in seen:
                raise AssertionError(f"sender {sid} appears in both {seen[sid]} and {name}")
            seen[sid] = name
