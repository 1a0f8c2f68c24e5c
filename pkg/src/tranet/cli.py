"""``tranet`` command-line entry point.

Exit codes: 0 success, 1 configuration or protocol error, 2 data or I/O error,
3 numeric failure.  ``check`` exits with the number of failed checks (max 125).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from tranet import numcore as nc
from tranet.data import (
    LANDMARKS_FILE,
    MANIFEST_FILE,
    DataError,
    SynthSpec,
    dataset_stats,
    generate_synthetic,
    load_dataset,
)
from tranet.network import ConfigError, ModelConfig, build_model, content_hash, load_weights, resolve_config
from tranet.training import (
    EvalReport,
    NumericError,
    ProtocolError,
    SampleSet,
    TrainConfig,
    cross_validate,
    evaluate,
    format_table,
    run_fold,
    split_subjects,
    write_metrics_csv,
)
from tranet.verify.suites import run_check, suite_checks

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MAX_CHECK_EXIT = 125
SEED_ENV = "TRA_SEED"
RUNS_FILE = "runs.jsonl"

ABLATION_VARIANTS: dict[str, dict[str, bool]] = {
    "backbone": {"enable_hard_mask": False, "enable_cbam": False},
    "backbone+cbam": {"enable_hard_mask": False, "enable_cbam": True},
    "backbone+hm": {"enable_hard_mask": True, "enable_cbam": False},
    "hm+cbam-no-channel": {"enable_channel_att": False},
    "hm+cbam-no-spatial": {"enable_spatial_att": False},
    "full+residual": {"cbam_residual": True},
    "full": {},
}

log = logging.getLogger("tranet")


def variant_flags(name: str) -> dict[str, bool]:
    """Complete ablation flag set for a named variant; unspecified flags take the full-model value."""
    if name not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; valid: {', '.join(ABLATION_VARIANTS)}")
    full = {
        "enable_hard_mask": True,
        "enable_cbam": True,
        "enable_channel_att": True,
        "enable_spatial_att": True,
        "cbam_residual": False,
    }
    return {**full, **ABLATION_VARIANTS[name]}


@dataclass
class RunRecord:
    command: str
    config: dict
    seed: int
    weights_hash: str | None
    metrics_csv: str | None
    seconds: float

    def append_to(self, path: Path) -> None:
        with open(path, "a") as fh:
            fh.write(json.dumps(dataclasses.asdict(self), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared plumbing


def resolve_seed(flag: int | None, fallback: int) -> int:
    """``--seed`` wins, then ``$TRA_SEED``, then the config file's value."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV, "").strip()
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return fallback


def _load_json_config(loader, path: str, what: str):
    try:
        return loader(path)
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{what} {path}: {exc}") from exc


def load_configs(args) -> tuple[ModelConfig, TrainConfig]:
    model_cfg = _load_json_config(resolve_config, args.model_cfg, "model config")
    model_cfg.validate()
    train_cfg = _load_json_config(TrainConfig.load, args.train_cfg, "training config") if args.train_cfg else TrainConfig()
    overrides: dict[str, Any] = {"seed": resolve_seed(args.seed, train_cfg.seed)}
    if args.epoch_cap is not None:
        overrides["epoch_cap"] = args.epoch_cap
    if args.precision is not None:
        overrides["precision"] = args.precision
    train_cfg = dataclasses.replace(train_cfg, **overrides)
    train_cfg.validate()
    return model_cfg, train_cfg


def load_data(data_dir: str, input_size: int) -> SampleSet:
    root = Path(data_dir)
    manifest = root / MANIFEST_FILE
    if not manifest.is_file():
        raise DataError(f"no {MANIFEST_FILE} in {root}")
    result = load_dataset(manifest, input_size, root / LANDMARKS_FILE, log=log.warning)
    if not result.samples:
        raise DataError(f"{manifest} has no usable rows")
    log.info(
        "loaded %d frames from %d subjects (%d skipped, %d flagged bad)",
        len(result.samples),
        len({s.subject for s in result.samples}),
        len(result.skipped),
        result.flagged_bad,
    )
    return result.data


def prepare_out(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory {out} is not writable")
    return out


def write_history_csv(path: Path, folds) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "epoch", "train_loss", "mean_f1", "seconds"])
        for fold, result in folds:
            for h in result.history:
                w.writerow([fold, h.epoch, repr(h.train_loss), "" if h.mean_f1 is None else repr(h.mean_f1), f"{h.seconds:.3f}"])


def _snapshot(args, model_cfg: ModelConfig, train_cfg: TrainConfig, **extra) -> dict:
    return {"data": str(args.data), "model": model_cfg.to_dict(), "train": train_cfg.to_dict(), **extra}


def _combined_hash(hashes: Sequence[str]) -> str:
    return hashlib.sha256("".join(hashes).encode()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = _load_json_config(SynthSpec.load, args.spec, "synth spec") if args.spec else SynthSpec()
    if args.seed is not None or os.environ.get(SEED_ENV):
        spec = dataclasses.replace(spec, seed=resolve_seed(args.seed, spec.seed))
    spec.validate()
    out = prepare_out(args.out)
    try:
        record = generate_synthetic(spec, out)
    except OSError as exc:
        raise DataError(f"cannot write synthetic data to {out}: {exc.strerror or exc}") from exc
    print(f"wrote {len(record.ids)} frames for {spec.num_subjects} subjects to {out}")
    stats = dataset_stats(load_dataset(out / MANIFEST_FILE, spec.size).data)
    print(stats.format())
    return EXIT_OK


def _holdout(args, data: SampleSet, seed: int) -> list[str]:
    if args.holdout:
        chosen = [s.strip() for s in args.holdout.split(",") if s.strip()]
        missing = sorted(set(chosen) - set(data.subjects.tolist()))
        if missing:
            raise ProtocolError(f"holdout subject(s) {missing} not in the dataset")
        return chosen
    return split_subjects(data.subjects, 3, seed)[0]


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_configs(args)
    data = load_data(args.data, model_cfg.input_size)
    out = prepare_out(args.out)
    t0 = time.perf_counter()
    test_subjects = _holdout(args, data, train_cfg.seed)
    test_mask = np.isin(data.subjects, test_subjects)
    if test_mask.all():
        raise ProtocolError("holdout leaves no training subjects")
    train, test = data.subset(np.flatnonzero(~test_mask)), data.subset(np.flatnonzero(test_mask))
    log.info("training on %d frames, testing on subjects %s", len(train.ids), ",".join(test_subjects))
    result = run_fold(model_cfg, train_cfg, train, test, fold=1, log=log.info, keep_state=True)

    weights = out / "weights.traw"
    nc.save_weights(weights, result.state)
    metrics = out / "metrics.csv"
    write_metrics_csv(metrics, [result.report])
    write_history_csv(out / "history.csv", [(1, result)])
    print(format_table([("TRA-Net", result.report)]))
    print(f"best epoch {result.best_epoch} of {result.epochs_run}; train loss {result.initial_loss:.4f} -> {result.final_loss:.4f}"
          if result.initial_loss is not None else "untrained evaluation (epoch cap 0)")
    RunRecord(
        "train",
        _snapshot(args, model_cfg, train_cfg, holdout=list(test_subjects)),
        train_cfg.seed,
        content_hash(result.state),
        str(metrics),
        time.perf_counter() - t0,
    ).append_to(out / RUNS_FILE)
    return EXIT_OK


def _crossval(args, model_cfg, train_cfg, data, out: Path, label: str, command: str) -> EvalReport:
    t0 = time.perf_counter()
    cv = cross_validate(data, model_cfg, train_cfg, folds=args.folds, jobs=args.jobs, log=log.info, keep_state=True)
    metrics = out / "metrics.csv"
    write_metrics_csv(metrics, cv.reports)
    write_history_csv(out / "history.csv", [(i + 1, f) for i, f in enumerate(cv.folds)])
    hashes = [content_hash(f.state) for f in cv.folds if f.state is not None]
    RunRecord(
        command,
        _snapshot(args, model_cfg, train_cfg, folds=args.folds, splits=cv.splits, variant=label),
        train_cfg.seed,
        _combined_hash(hashes) if hashes else None,
        str(metrics),
        time.perf_counter() - t0,
    ).append_to(out / RUNS_FILE)
    rows = [(f"{label} fold {r.fold}", r) for r in cv.reports] + [(f"{label} mean", cv.mean)]
    print(format_table(rows))
    return cv.mean


def cmd_crossval(args) -> int:
    model_cfg, train_cfg = load_configs(args)
    data = load_data(args.data, model_cfg.input_size)
    split_subjects(data.subjects, args.folds, train_cfg.seed)  # fail fast before any training
    _crossval(args, model_cfg, train_cfg, data, prepare_out(args.out), "TRA-Net", "crossval")
    return EXIT_OK


def cmd_ablate(args) -> int:
    names = list(ABLATION_VARIANTS) if not args.variant or "all" in args.variant else args.variant
    flags = {name: variant_flags(name) for name in names}
    model_cfg, train_cfg = load_configs(args)
    data = load_data(args.data, model_cfg.input_size)
    split_subjects(data.subjects, args.folds, train_cfg.seed)
    out = prepare_out(args.out)
    means = []
    for name in names:
        cfg = dataclasses.replace(train_cfg, ablation=flags[name])
        cfg.apply_ablation(model_cfg).validate()
        log.info("variant %s: %s", name, flags[name])
        sub = prepare_out(out / name.replace("+", "_"))
        means.append((name, _crossval(args, model_cfg, cfg, data, sub, name, "ablate")))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "mean_f1", "mean_accuracy"] + [f"f1_AU{a}" for a in means[0][1].aus])
        for name, rep in means:
            w.writerow([name, repr(rep.mean_f1), repr(rep.mean_accuracy)] + [repr(float(v)) for v in rep.f1])
    print(format_table(means))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model_cfg = _load_json_config(resolve_config, args.model_cfg, "model config")
    model_cfg.validate()
    data = load_data(args.data, model_cfg.input_size)
    if args.subjects:
        keep = [s.strip() for s in args.subjects.split(",") if s.strip()]
        data = data.subset(np.flatnonzero(np.isin(data.subjects, keep)))
        if not data.ids:
            raise DataError(f"none of the subjects {keep} are in the dataset")
    with nc.precision(args.precision or "float32"):
        model = build_model(model_cfg, 0)
        try:
            load_weights(model, args.weights)
        except OSError as exc:
            raise DataError(f"cannot read weights {args.weights}: {exc.strerror or exc}") from exc
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"weights {args.weights} do not fit the model config: {exc}") from exc
        report = evaluate(model, data)
    print(format_table([("TRA-Net", report)]))
    if args.out:
        write_metrics_csv(prepare_out(args.out) / "metrics.csv", [report])
    return EXIT_OK


def cmd_check(args) -> int:
    checks = suite_checks(args.suite, quick=args.quick)
    failed = 0
    worst_name = ""
    t0 = time.perf_counter()
    for name, fn in checks:
        r = run_check(name, fn)
        failed += not r.passed
        if not r.passed and not worst_name:
            worst_name = name
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<34} {r.seconds:6.1f}s  {r.detail}", flush=True)
    total = time.perf_counter() - t0
    print(f"{len(checks) - failed}/{len(checks)} checks passed in {total:.1f}s" + (f"; first failure: {worst_name}" if failed else ""))
    return min(failed, MAX_CHECK_EXIT)


# ---------------------------------------------------------------------------
# argument parsing


def _training_flags(p: argparse.ArgumentParser, folds: bool) -> None:
    p.add_argument("--data", required=True, help="dataset directory holding manifest.csv and landmarks.txt")
    p.add_argument("--model-cfg", default="toy", help="preset name (toy, paper224) or JSON file")
    p.add_argument("--train-cfg", help="training config JSON (defaults used when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help=f"overrides the config seed and ${SEED_ENV}")
    p.add_argument("--epoch-cap", type=int, help="maximum epochs per fold; 0 evaluates the untrained model")
    p.add_argument("--precision", choices=("float32", "float64"))
    if folds:
        p.add_argument("--folds", type=int, default=3)
        p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tranet", description="Three-region attention network for facial AU detection")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic AU dataset")
    p.add_argument("--spec", help="synth spec JSON (defaults used when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on all but the holdout subjects and evaluate on them")
    _training_flags(p, folds=False)
    p.add_argument("--holdout", help="comma-separated test subjects (default: first of a seeded 3-way split)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="subject-disjoint k-fold cross-validation")
    _training_flags(p, folds=True)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("ablate", help="cross-validate ablation variants")
    _training_flags(p, folds=True)
    p.add_argument("--variant", action="append", help=f"repeatable; one of {', '.join(ABLATION_VARIANTS)}, or all")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("evaluate", help="score saved weights on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model-cfg", default="toy")
    p.add_argument("--weights", required=True)
    p.add_argument("--subjects", help="comma-separated subjects to score (default: all)")
    p.add_argument("--out")
    p.add_argument("--precision", choices=("float32", "float64"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("check", help="run the verification suites")
    p.add_argument("--suite", choices=("grad", "invariants", "oracles", "all"), default="all")
    p.add_argument("--quick", action="store_true", help="fewer random instances per check")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, ProtocolError, nc.ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}; no weights were written", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
