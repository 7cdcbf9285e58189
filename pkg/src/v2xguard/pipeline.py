"""Glue between traces, sequences, windows, models and verdicts."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .domain import SenderSequence
from .features import (
    MIN_SEQUENCE_LENGTH,
    NormStats,
    SplitStats,
    WindowSet,
    build_sequences,
    windows_for,
)
from .ingestion import DEFAULT_MAX_GAP, TraceFile, align, group_by_sender
from .model import DecoderModel, ModelConfig
from .scoring import TOP_K, BenignMae, SenderVerdict, fit_benign_mae, residuals, score_senders
from .traffic import Regime, TrafficConfig, generate


@dataclass(frozen=True)
class CorpusConfig:
    """A set of independent synthetic scenes.

    Sender ids are prefixed per scene so they stay unique across the corpus.
    """

    seed: int = 7
    scenes: int = 10
    senders_per_scene: int = 20
    duration: float = 480.0
    regimes: tuple[str, ...] = (Regime.RUSH_HOUR.value, Regime.AFTERNOON.value)
    traffic: dict = field(default_factory=dict)

    def scene_configs(self) -> list[TrafficConfig]:
        out = []
        for i in range(self.scenes):
            regime = Regime(self.regimes[i % len(self.regimes)])
            seed = int(np.random.SeedSequence([self.seed, i]).generate_state(1)[0])
            out.append(
                TrafficConfig(
                    seed=seed,
                    num_senders=self.senders_per_scene,
                    duration=self.duration,
                    regime=regime,
                    sender_prefix=f"{regime.value[0]}{self.seed}s{i}v",
                    **self.traffic,
                )
            )
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regimes"] = list(self.regimes)
        return d


def generate_corpus(cfg: CorpusConfig) -> list[TraceFile]:
    return [generate(tc) for tc in cfg.scene_configs()]


@dataclass
class IngestStats:
    received: int = 0
    discarded: int = 0
    split: SplitStats = field(default_factory=SplitStats)


def sequences_from_traces(
    traces: Iterable[TraceFile],
    max_gap: float = DEFAULT_MAX_GAP,
    gap_threshold: float = DEFAULT_MAX_GAP,
    min_length: int = MIN_SEQUENCE_LENGTH,
    stats: IngestStats | None = None,
) -> list[SenderSequence]:
    stats = stats if stats is not None else IngestStats()
    out: list[SenderSequence] = []
    for trace in traces:
        obs, discarded = align(trace, max_gap)
        stats.received += len(obs) + discarded
        stats.discarded += discarded
        out.extend(build_sequences(group_by_sender(obs), gap_threshold, min_length, stats.split))
    return out


def select(sequences: Sequence[SenderSequence], sender_ids: Iterable[str]) -> list[SenderSequence]:
    wanted = set(sender_ids)
    return [s for s in sequences if s.sender_id in wanted]


def score_sequences(
    model_config: ModelConfig,
    weights,
    norm: NormStats,
    sequences: Sequence[SenderSequence],
    mae: BenignMae,
    tau: float,
    k: int = TOP_K,
) -> list[SenderVerdict]:
    windows = windows_for(sequences, norm, model_config.window)
    errors = residuals(DecoderModel(model_config), weights, windows)
    return score_senders(windows, errors, mae, tau, k)


def benign_mae_for(model_config: ModelConfig, weights, windows: WindowSet) -> BenignMae:
    return fit_benign_mae(residuals(DecoderModel(model_config), weights, windows))
