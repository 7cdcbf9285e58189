"""Command-line entry point.

Every subcommand accepts ``--config file.json`` whose keys use the flag names
(with underscores); explicit flags override the file. Randomized steps refuse
to run without a seed. Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt_io
from .attacks import AttackConfig, choose_victims, inject
from .domain import AttackLabel, SenderSequence
from .evaluation import attribution_csv, evaluate, metrics_csv, roc_csv
from .experiment import ExperimentConfig, calibrate, config_hash, run_experiment
from .features import fit_norm_stats, split_by_sender, windows_for
from .ingestion import read_trace, write_trace
from .model import ModelConfig, count_parameters, init_weights
from .pipeline import CorpusConfig, generate_corpus, score_sequences, select, sequences_from_traces
from .scoring import DEFAULT_PERCENTILE, verdicts_from_csv, verdicts_to_csv
from .store import IngestConfig, StoreError, hash_files, is_fresh, load_store, save_store
from .training import TrainConfig, TrainingDiverged, train

logger = logging.getLogger("v2xguard")

TRACE_SUFFIXES = (".ndjson", ".jsonl")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _require(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command}: missing required {flags} (flag or config key)")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _trace_paths(items) -> list[Path]:
    out = []
    for item in items or []:
        p = Path(item)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix in TRACE_SUFFIXES))
        elif p.exists():
            out.append(p)
        else:
            raise DataError(f"trace not found: {p}")
    return out


def _read_traces(paths):
    traces = []
    for p in paths:
        trace, _ = read_trace(p)  # malformed lines are logged by the reader
        if not trace.records:
            raise DataError(f"{p}: no valid records")
        traces.append(trace)
    return traces


def _ingest_config(args) -> IngestConfig:
    return IngestConfig(args.max_gap, args.gap_threshold, args.min_length)


def _load_sequences(args) -> tuple[list[SenderSequence], str]:
    """Sequences and source trace hash from ``--windows`` (a store) or ``--traces``.

    A store given together with traces must have been built from them.
    """
    paths = _trace_paths(args.traces)
    if args.windows:
        seqs, meta = load_store(args.windows)
        if paths and meta["trace_hash"] != hash_files(paths):
            raise StoreError(f"window store {args.windows} is stale: trace hash differs; re-run ingest")
        if meta["feature_hash"] != _ingest_config(args).digest():
            raise StoreError(f"window store {args.windows} was built with different ingest settings")
        return seqs, meta["trace_hash"]
    if not paths:
        raise UsageError(f"{args.command}: give --traces or --windows")
    seqs = sequences_from_traces(_read_traces(paths), args.max_gap, args.gap_threshold, args.min_length)
    return seqs, hash_files(paths)


def _load_checkpoint(args, need_calibration: bool = False) -> ckpt_io.Checkpoint:
    _require(args, "checkpoint")
    ck = ckpt_io.load(args.checkpoint)
    if need_calibration and not ck.calibrated:
        raise DataError(f"{args.checkpoint} has no threshold; run calibrate first")
    return ck


# subcommands


def cmd_generate(args) -> int:
    _require(args, "out", "seed")
    regimes = ("rush_hour", "afternoon") if args.regime == "both" else (args.regime,)
    cfg = CorpusConfig(
        seed=args.seed,
        scenes=args.scenes,
        senders_per_scene=args.senders,
        duration=args.duration,
        regimes=regimes,
        traffic=dict(args.traffic or {}),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, trace in enumerate(generate_corpus(cfg)):
        write_trace(trace, out / f"scene_{i:03d}.ndjson")
    _write_json(out / "corpus.json", cfg.to_dict())
    print(f"wrote {cfg.scenes} scenes to {out}")
    return 0


def cmd_inject(args) -> int:
    _require(args, "trace", "out", "attack", "seed")
    (trace,) = _read_traces(_trace_paths([args.trace]))
    if args.victims:
        victims = [v for v in args.victims.split(",") if v]
    else:
        victims = choose_victims(trace, args.fraction, seed=args.seed)
    try:
        cfg = AttackConfig(label=AttackLabel.parse(args.attack), seed=args.seed, **(args.params or {}))
    except TypeError as exc:
        raise UsageError(f"inject: bad attack parameter: {exc}") from exc
    attacked = inject(trace, victims, cfg)
    write_trace(attacked, args.out, with_label=True)
    print(f"{cfg.label.code} injected into {len(victims)} senders: {args.out}")
    return 0


def cmd_ingest(args) -> int:
    _require(args, "out")
    paths = _trace_paths(args.traces)
    if not paths:
        raise UsageError("ingest: give --traces")
    cfg = _ingest_config(args)
    trace_hash = hash_files(paths)
    if not args.force and is_fresh(args.out, trace_hash, cfg):
        print(f"window store up to date: {args.out}")
        return 0
    seqs = sequences_from_traces(_read_traces(paths), cfg.max_gap, cfg.gap_threshold, cfg.min_length)
    meta = save_store(args.out, seqs, trace_hash, cfg)
    print(f"stored {meta['sequences']} sender sequences in {args.out} (payload {meta['payload_hash'][:12]})")
    return 0


def cmd_train(args) -> int:
    _require(args, "out", "seed")
    if args.traces or args.windows:
        seqs, corpus_hash = _load_sequences(args)
    else:
        corpus = CorpusConfig(seed=args.seed, duration=540.0)
        logger.info("no input given; generating the default synthetic training corpus")
        seqs = sequences_from_traces(generate_corpus(corpus))
        corpus_hash = config_hash(corpus)
    model_cfg = ModelConfig.from_dict(args.model or {})
    overrides = {k: v for k, v in (("max_epochs", args.max_epochs), ("lr", args.lr), ("batch_size", args.batch_size)) if v is not None}
    train_cfg = TrainConfig.from_dict({**(args.training or {}), **overrides, "seed": args.seed})
    norm = fit_norm_stats(seqs)
    splits = split_by_sender([s.sender_id for s in seqs], seed=args.seed)
    windows = {k: windows_for(select(seqs, ids), norm, model_cfg.window) for k, ids in splits.items()}
    print("windows: " + ", ".join(f"{k} {len(v)}" for k, v in windows.items()))
    weights = init_weights(model_cfg, args.seed)
    try:
        best, report = train(model_cfg, weights, windows["train"], windows["val"], train_cfg, args.max_steps)
    except TrainingDiverged as exc:
        raise DataError(f"training diverged: {exc}") from exc
    ck = ckpt_io.Checkpoint(
        model_cfg, best, norm, train_cfg, seed=args.seed, corpus_hash=corpus_hash, extra={"splits": splits}
    )
    ckpt_io.save(ck, args.out)
    if args.report:
        _write_json(Path(args.report), report.to_dict())
    print(f"parameters: {count_parameters(best)}")
    print(f"best epoch {report.best_epoch} val loss {report.best_val_loss:.6g} ({report.stop_reason})")
    print(f"checkpoint: {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    ck = _load_checkpoint(args)
    seqs, _ = _load_sequences(args)
    cal = calibrate(ck, seqs, args.percentile)
    out = args.out or args.checkpoint
    ckpt_io.save(cal.checkpoint, out)
    print(f"tau {cal.checkpoint.tau:.6g} at percentile {args.percentile:g}")
    print(f"calibration senders {len(cal.verdicts)}, flagged fraction {cal.fpr:.4%}")
    print(f"checkpoint: {out}")
    return 0


def cmd_score(args) -> int:
    ck = _load_checkpoint(args, need_calibration=True)
    seqs, _ = _load_sequences(args)
    verdicts = score_sequences(ck.model_config, ck.weights, ck.norm, seqs, ck.mae, ck.tau)
    text = verdicts_to_csv(verdicts)
    if args.out:
        Path(args.out).write_text(text)
        flagged = sum(v.flagged for v in verdicts)
        print(f"{len(verdicts)} senders scored, {flagged} flagged: {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args) -> int:
    _require(args, "verdicts", "out_dir")
    if args.tau is None:
        ck = _load_checkpoint(args, need_calibration=True)
        tau, percentile = ck.tau, ck.percentile
    else:
        tau, percentile = args.tau, float("nan")
    verdicts = []
    for p in args.verdicts:
        path = Path(p)
        if not path.exists():
            raise DataError(f"verdict file not found: {path}")
        verdicts.extend(verdicts_from_csv(path.read_text(), tau))
    benign = [v for v in verdicts if not v.is_attack]
    attacks: dict[AttackLabel, list] = {}
    for v in verdicts:
        if v.is_attack:
            attacks.setdefault(v.label, []).append(v)
    if not attacks:
        raise DataError("no attack senders among the verdicts")
    report = evaluate(benign, attacks, tau, percentile)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"metrics.csv": metrics_csv(report), "roc.csv": roc_csv(report), "attribution.csv": attribution_csv(report)}
    for name, text in files.items():
        (out / name).write_text(text)
    summary = report.summary()
    summary["report_hash"] = config_hash({k: files[k] for k in sorted(files)})
    _write_json(out / "summary.json", summary)
    print(format_summary(summary))
    return 0


def format_summary(summary: dict) -> str:
    lines = [
        f"threshold {summary['tau']:.6g} (percentile {summary['percentile']:g}), "
        f"benign senders {summary['n_benign']}, benign FPR {summary['benign_fpr']:.2%}",
        f"{'attack':<8}{'n':>6}{'AUC':>9}{'acc':>9}{'prec':>9}{'recall':>9}{'F1':>9}",
    ]
    for code, m in summary["attacks"].items():
        lines.append(
            f"{code:<8}{m['n_attack']:>6}{m['auc']:>9.4f}{m['accuracy']:>9.4f}"
            f"{m['precision']:>9.4f}{m['recall']:>9.4f}{m['f1']:>9.4f}"
        )
    lines.append(f"mean AUC {summary['mean_auc']:.4f}, mean F1 {summary['mean_f1']:.4f}")
    if "report_hash" in summary:
        lines.append(f"report hash {summary['report_hash']}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    if args.checkpoint:
        ck = ckpt_io.load(args.checkpoint)
        header = ck.header()
        header.pop("norm_stats")
        header["extra"] = sorted(header["extra"])
        print(json.dumps(header, indent=2, sort_keys=True))
    if args.eval_dir:
        path = Path(args.eval_dir) / "summary.json"
        if not path.exists():
            raise DataError(f"no summary.json in {args.eval_dir}")
        print(format_summary(json.loads(path.read_text())))
    if not args.checkpoint and not args.eval_dir:
        raise UsageError("report: give --eval-dir and/or --checkpoint")
    return 0


def cmd_experiment(args) -> int:
    _require(args, "out_dir", "seed")
    raw = {k: getattr(args, k) for k in ExperimentConfig.__dataclass_fields__ if getattr(args, k, None) is not None}
    cfg = ExperimentConfig.from_dict(raw)
    cfg = replace(cfg, seed=args.seed, training=replace(cfg.training, seed=args.seed))
    if args.train_regime or args.test_regime:
        cfg = cfg.for_regimes(args.train_regime, args.test_regime)
    result = run_experiment(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_io.save(result.checkpoint, out / "model.ckpt")
    for name, text in result.report_files().items():
        (out / name).write_text(text)
    summary = result.summary()
    summary["timings"] = result.timings
    _write_json(out / "summary.json", summary)
    _write_json(out / "experiment.json", cfg.to_dict())
    _write_json(out / "train_report.json", result.trained.report.to_dict())
    print(format_summary(summary))
    return 0


# parser


def _add_inputs(p) -> None:
    p.add_argument("--traces", nargs="+", help="trace files or directories of *.ndjson / *.jsonl")
    p.add_argument("--windows", help="window store written by 'ingest'")
    _add_ingest_options(p)


def _add_ingest_options(p) -> None:
    d = IngestConfig()
    p.add_argument("--max-gap", type=float, default=d.max_gap, help="max CAM-to-ego alignment gap in seconds")
    p.add_argument("--gap-threshold", type=float, default=d.gap_threshold, help="sequence split gap in seconds")
    p.add_argument("--min-length", type=int, default=d.min_length, help="minimum messages per segment")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="v2xguard", description="Unsupervised V2X misbehavior detection from CAM traces.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name, help_text, func, extra_keys=()):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with option values")
        p.set_defaults(func=func, extra_keys=tuple(extra_keys), **{k: None for k in extra_keys})
        subs[name] = p
        return p

    p = add("generate", "write a synthetic benign corpus, one trace per scene", cmd_generate, ["traffic"])
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--senders", type=int, default=20, help="senders per scene")
    p.add_argument("--duration", type=float, default=540.0, help="scene length in seconds")
    p.add_argument("--regime", choices=["rush_hour", "afternoon", "both"], default="both")

    p = add("inject", "inject one attack type into a trace", cmd_inject, ["params"])
    p.add_argument("--trace")
    p.add_argument("--out")
    p.add_argument("--attack", help="label code, e.g. A1")
    p.add_argument("--seed", type=int)
    p.add_argument("--victims", help="comma-separated sender ids")
    p.add_argument("--fraction", type=float, default=0.15, help="victim fraction when --victims is absent")

    p = add("ingest", "parse, align and segment traces into a window store", cmd_ingest)
    p.add_argument("--traces", nargs="+")
    p.add_argument("--out", help="store path (.npz)")
    p.add_argument("--force", action="store_true", help="rebuild even if the store is up to date")
    _add_ingest_options(p)

    p = add("train", "train the predictor on benign data", cmd_train, ["model", "training"])
    _add_inputs(p)
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--report", help="write the per-epoch training report as JSON")

    p = add("calibrate", "fit the benign MAE and the percentile threshold", cmd_calibrate)
    p.add_argument("--checkpoint")
    _add_inputs(p)
    p.add_argument("--percentile", type=float, default=DEFAULT_PERCENTILE)
    p.add_argument("--out", help="output checkpoint (default: overwrite input)")

    p = add("score", "score senders and write a verdict CSV", cmd_score)
    p.add_argument("--checkpoint")
    _add_inputs(p)
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = add("evaluate", "per-attack metrics, ROC and attribution from verdict CSVs", cmd_evaluate)
    p.add_argument("--verdicts", nargs="+")
    p.add_argument("--checkpoint", help="source of the threshold")
    p.add_argument("--tau", type=float, help="explicit threshold instead of the checkpoint's")
    p.add_argument("--out-dir")

    p = add("report", "print an evaluation summary or checkpoint header", cmd_report)
    p.add_argument("--eval-dir")
    p.add_argument("--checkpoint")

    fields = [f for f in ExperimentConfig.__dataclass_fields__ if f != "seed"]
    p = add("experiment", "train, calibrate and evaluate on synthetic corpora", cmd_experiment, fields)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--train-regime", choices=["rush_hour", "afternoon"])
    p.add_argument("--test-regime", choices=["rush_hour", "afternoon"])
    return parser, subs


def _apply_config(args, parser, subs, argv) -> argparse.Namespace:
    path = Path(args.config)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    sp = subs[args.command]
    allowed = {a.dest for a in sp._actions} | set(args.extra_keys)
    allowed -= {"help", "config"}
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise UsageError(f"{args.command}: unknown config keys {unknown}")
    sp.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            args = _apply_config(args, parser, subs, argv)
        return args.func(args)
    except UsageError as exc:
        print(f"v2xguard: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, StoreError, ckpt_io.CheckpointError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"v2xguard: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
