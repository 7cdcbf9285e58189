"""End-to-end protocol: train, calibrate, inject attacks, evaluate.

The protocol uses three independently seeded synthetic corpora:

* a training corpus, split 70/15/15 by sender;
* a benign calibration corpus, with the same scene length as the held-out
  corpus, on which the benign MAE and the threshold are fitted;
* a held-out corpus in which a fixed number of victims per scene receive each
  attack while every other sender forms the benign test pool.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

from .attacks import AttackConfig, choose_victims, inject
from .checkpoint import Checkpoint, to_bytes
from .domain import AttackLabel, SenderSequence
from .evaluation import EvalReport, attribution_csv, evaluate, metrics_csv, roc_csv
from .features import fit_norm_stats, split_by_sender, windows_for
from .ingestion import TraceFile
from .model import ModelConfig, init_weights
from .pipeline import CorpusConfig, benign_mae_for, generate_corpus, score_sequences, select, sequences_from_traces
from .scoring import DEFAULT_PERCENTILE, SenderVerdict, calibrate_threshold, verdicts_to_csv
from .traffic import Regime
from .training import TrainConfig, TrainReport, train

logger = logging.getLogger(__name__)

DEFAULT_ATTACKS = tuple(int(label) for label in AttackLabel if label != AttackLabel.BENIGN)
# keeps full-size training inside a 15 minute single-CPU budget
DEFAULT_MAX_EPOCHS = 22


def config_hash(obj) -> str:
    """SHA-256 of the canonical JSON form of a config-like object."""
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def _regime_corpus(base: CorpusConfig, regimes: tuple[str, ...] | None) -> CorpusConfig:
    return base if regimes is None else replace(base, regimes=tuple(regimes))


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    train_corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(seed=7, duration=540.0))
    calib_corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(seed=101, scenes=12, duration=240.0))
    test_corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(seed=202, scenes=12, duration=240.0))
    victims_per_scene: int = 3
    attacks: tuple[int, ...] = DEFAULT_ATTACKS
    percentile: float = DEFAULT_PERCENTILE
    split_ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=lambda: TrainConfig(seed=7, max_epochs=DEFAULT_MAX_EPOCHS))

    def for_regimes(self, train_regime: str | None, test_regime: str | None) -> ExperimentConfig:
        """Training and calibration on one regime, held-out evaluation on another."""
        train_r = None if train_regime is None else (Regime(train_regime).value,)
        test_r = None if test_regime is None else (Regime(test_regime).value,)
        return replace(
            self,
            train_corpus=_regime_corpus(self.train_corpus, train_r),
            calib_corpus=_regime_corpus(self.calib_corpus, train_r),
            test_corpus=_regime_corpus(self.test_corpus, test_r),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("train_corpus", "calib_corpus", "test_corpus"):
            d[key] = getattr(self, key).to_dict()
        d["attacks"] = list(self.attacks)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        for key in ("train_corpus", "calib_corpus", "test_corpus"):
            if key in d:
                c = dict(d[key])
                if "regimes" in c:
                    c["regimes"] = tuple(c["regimes"])
                d[key] = CorpusConfig(**c)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "training" in d:
            d["training"] = TrainConfig.from_dict(d["training"])
        for key in ("attacks", "split_ratios"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class TrainedModel:
    checkpoint: Checkpoint
    report: TrainReport
    splits: dict[str, list[str]]
    sequences: list[SenderSequence]

    @property
    def val_sequences(self) -> list[SenderSequence]:
        return select(self.sequences, self.splits["val"])


def train_model(cfg: ExperimentConfig, max_steps: int | None = None) -> TrainedModel:
    sequences = sequences_from_traces(generate_corpus(cfg.train_corpus))
    norm = fit_norm_stats(sequences)
    splits = split_by_sender([s.sender_id for s in sequences], cfg.split_ratios, cfg.seed)
    windows = {k: windows_for(select(sequences, ids), norm, cfg.model.window) for k, ids in splits.items()}
    logger.info("training windows: %s", {k: len(v) for k, v in windows.items()})
    weights = init_weights(cfg.model, cfg.seed)
    best, report = train(cfg.model, weights, windows["train"], windows["val"], cfg.training, max_steps=max_steps)
    ckpt = Checkpoint(
        model_config=cfg.model,
        weights=best,
        norm=norm,
        train_config=cfg.training,
        seed=cfg.seed,
        corpus_hash=config_hash(cfg.train_corpus),
    )
    return TrainedModel(ckpt, report, splits, sequences)


@dataclass
class Calibration:
    checkpoint: Checkpoint
    verdicts: list[SenderVerdict]

    @property
    def fpr(self) -> float:
        tau = self.checkpoint.tau
        return sum(v.mean_score > tau for v in self.verdicts) / len(self.verdicts)


def calibrate(
    ckpt: Checkpoint, sequences: list[SenderSequence], percentile: float = DEFAULT_PERCENTILE
) -> Calibration:
    """Fit the benign MAE and the percentile threshold on benign sequences."""
    benign = [s for s in sequences if s.label == AttackLabel.BENIGN]
    windows = windows_for(benign, ckpt.norm, ckpt.model_config.window)
    mae = benign_mae_for(ckpt.model_config, ckpt.weights, windows)
    verdicts = [
        v for v in score_sequences(ckpt.model_config, ckpt.weights, ckpt.norm, benign, mae, 0.0) if v.scored
    ]
    tau = calibrate_threshold([v.mean_score for v in verdicts], percentile)
    scored = ckpt.with_calibration(mae, tau, percentile)
    verdicts = [replace(v, flagged=v.mean_score > tau) for v in verdicts]
    return Calibration(scored, verdicts)


def calibration_sequences(cfg: ExperimentConfig) -> list[SenderSequence]:
    # sender scores are means over windows, so their spread depends on sequence
    # length; the training split's longer scenes would pull the threshold down
    return sequences_from_traces(generate_corpus(cfg.calib_corpus))


@dataclass
class HeldOut:
    traces: list[TraceFile]
    victims: list[list[str]]
    benign: list[SenderSequence]


def held_out(cfg: ExperimentConfig) -> HeldOut:
    traces = generate_corpus(cfg.test_corpus)
    victims, benign = [], []
    for i, trace in enumerate(traces):
        n_senders = len({r.sender_id for r in trace.records if not r.is_ego})
        fraction = cfg.victims_per_scene / max(n_senders, 1)
        v = choose_victims(trace, fraction, seed=cfg.seed * 1000 + i)
        victims.append(v)
        vset = set(v)
        benign.extend(s for s in sequences_from_traces([trace]) if s.sender_id not in vset)
    return HeldOut(traces, victims, benign)


def attack_verdicts(ckpt: Checkpoint, data: HeldOut, label: AttackLabel, seed: int) -> list[SenderVerdict]:
    out: list[SenderVerdict] = []
    for i, (trace, victims) in enumerate(zip(data.traces, data.victims)):
        attacked = inject(trace, victims, AttackConfig(label=label, seed=seed * 1000 + i))
        seqs = [s for s in sequences_from_traces([attacked]) if s.label == label]
        out.extend(score_sequences(ckpt.model_config, ckpt.weights, ckpt.norm, seqs, ckpt.mae, ckpt.tau))
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    trained: TrainedModel
    calibration: Calibration
    benign_verdicts: list[SenderVerdict]
    attack_verdicts: dict[AttackLabel, list[SenderVerdict]]
    report: EvalReport
    timings: dict[str, float]

    @property
    def checkpoint(self) -> Checkpoint:
        return self.calibration.checkpoint

    def report_files(self) -> dict[str, str]:
        verdicts = self.benign_verdicts + [v for vs in self.attack_verdicts.values() for v in vs]
        return {
            "metrics.csv": metrics_csv(self.report),
            "roc.csv": roc_csv(self.report),
            "attribution.csv": attribution_csv(self.report),
            "verdicts.csv": verdicts_to_csv(verdicts),
        }

    def report_hash(self) -> str:
        """Hash over the report tables and the calibrated checkpoint bytes."""
        files = self.report_files()
        files["checkpoint"] = hashlib.sha256(to_bytes(self.checkpoint)).hexdigest()
        return config_hash(files)

    def summary(self) -> dict:
        out = self.report.summary()
        out["config_hash"] = config_hash(self.config)
        out["calibration_fpr"] = self.calibration.fpr
        out["calibration_senders"] = len(self.calibration.verdicts)
        out["best_epoch"] = self.trained.report.best_epoch
        out["best_val_loss"] = self.trained.report.best_val_loss
        out["report_hash"] = self.report_hash()
        return out


def evaluate_checkpoint(
    cfg: ExperimentConfig, ckpt: Checkpoint, data: HeldOut | None = None
) -> tuple[list[SenderVerdict], dict[AttackLabel, list[SenderVerdict]], EvalReport]:
    if not ckpt.calibrated:
        raise ValueError("checkpoint has no threshold; calibrate first")
    data = data if data is not None else held_out(cfg)
    benign = score_sequences(ckpt.model_config, ckpt.weights, ckpt.norm, data.benign, ckpt.mae, ckpt.tau)
    attacks = {}
    for code in cfg.attacks:
        label = AttackLabel(code)
        attacks[label] = attack_verdicts(ckpt, data, label, cfg.seed)
        logger.info("scored %s: %d senders", label.code, len(attacks[label]))
    return benign, attacks, evaluate(benign, attacks, ckpt.tau, ckpt.percentile)


def run_experiment(cfg: ExperimentConfig, trained: TrainedModel | None = None) -> ExperimentResult:
    timings = {}
    t0 = time.perf_counter()
    trained = trained if trained is not None else train_model(cfg)
    timings["train"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    cal = calibrate(trained.checkpoint, calibration_sequences(cfg), cfg.percentile)
    timings["calibrate"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    benign, attacks, report = evaluate_checkpoint(cfg, cal.checkpoint)
    timings["evaluate"] = time.perf_counter() - t0
    return ExperimentResult(cfg, trained, cal, benign, attacks, report, timings)


def cross_regime_eval(
    cfg: ExperimentConfig, regime_a: str = Regime.RUSH_HOUR.value, regime_b: str = Regime.AFTERNOON.value
) -> tuple[ExperimentResult, ExperimentResult]:
    """Train and calibrate on one regime, evaluate on the other, both ways."""
    forward = run_experiment(cfg.for_regimes(regime_a, regime_b))
    backward = run_experiment(cfg.for_regimes(regime_b, regime_a))
    return forward, backward
