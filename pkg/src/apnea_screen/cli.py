"""Command-line entry point: synth, preprocess, train, evaluate, ablate, report, replicate.

Every subcommand reads one flat ``section.key = value`` configuration built
from built-in defaults, then an optional ``--config`` file, then ``--set``
overrides, then the dedicated flags. The merged result is written to
``config.txt`` in each output directory so a run can be repeated with
``--config out/config.txt``.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 artifact or compatibility error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .ablation import RUNS, ablation_run, write_ablation_csv
from .dsp import (CacheFormatError, SpectrogramConfig, SpectrogramError, SpectrogramSet, read_cache,
                  spectrograms_for, write_cache)
from .evaluation import (InfeasibleThresholdError, MetricsError, evaluate_scores,
                         parse_objective, pr_curve, read_metrics_json, threshold_sweep,
                         write_confusion_csv, write_metrics_json, write_pr_csv)
from .ingest import (CANONICAL_RATE_HZ, CHUNK_SECONDS, DEFAULT_APNEA_LABELS, IngestError,
                     build_dataset, load_records, parse_annotations, parse_split)
from .model import ModelConfigError, ResNetConfig, WeightFileError, load_weights, save_weights
from .synth import SynthConfig, SynthError, generate_dataset, write_dataset
from .training import (EarlyStoppingConfig, LossSpec, PlateauConfig, TrainConfig, TrainingError, train)

log = logging.getLogger("apnea_screen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ARTIFACT = 0, 2, 3, 4
CONFIG_FILE = "config.txt"

# Published test-split figures for the MIT-BIH polysomnographic recordings at
# threshold 0.635, shown next to a replication run for comparison.
REFERENCE_PERCENT = {"accuracy": 36.42, "precision": 7.95, "recall": 90.55, "f1": 14.61}
REFERENCE_THRESHOLD = 0.635


class ConfigError(ValueError):
    pass


class ArtifactError(ValueError):
    pass


@dataclass(frozen=True)
class DataSettings:
    apnea_labels: tuple[str, ...] = tuple(sorted(DEFAULT_APNEA_LABELS))
    chunk_seconds: float = CHUNK_SECONDS
    target_hz: float = CANONICAL_RATE_HZ


@dataclass(frozen=True)
class TrainSettings:
    batch_size: int = 32
    epochs: int = 80
    learning_rate: float = 1e-3
    oversample: bool = True
    class_weighting: bool = True
    validation_fraction: float = 0.1


@dataclass(frozen=True)
class EvalSettings:
    objective: str = "recall_floor:0.9"
    fallback: str = "max_f1"
    threshold: float | None = None


@dataclass(frozen=True)
class AblationSettings:
    runs: tuple[str, ...] = RUNS
    threshold: float = 0.5


@dataclass(frozen=True)
class SynthSettings:
    records: int = 18


SECTIONS = {
    "data": DataSettings(),
    "dsp": SpectrogramConfig(),
    "synth": SynthConfig(),
    "synth_run": SynthSettings(),
    "model": ResNetConfig(),
    "train": TrainSettings(),
    "loss": LossSpec(),
    "early_stopping": EarlyStoppingConfig(),
    "plateau": PlateauConfig(),
    "eval": EvalSettings(),
    "ablation": AblationSettings(),
}
# the run-wide seed lives at top level; per-section seed fields are not configurable
_SKIP = {"synth.seed"}


def default_config() -> dict[str, object]:
    out: dict[str, object] = {"seed": 0}
    for section, obj in SECTIONS.items():
        for f in fields(obj):
            key = f"{section}.{f.name}"
            if key not in _SKIP:
                out[key] = getattr(obj, f.name)
    # synth.records reads better than synth_run.records
    out["synth.records"] = out.pop("synth_run.records")
    return out


# --------------------------------------------------------------------------
# Config text format
# --------------------------------------------------------------------------


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def parse_value(key: str, text: str, default):
    text = text.strip()
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        like = default[0] if default else ""
        return tuple(_parse_scalar(t, like, key) for t in items)
    if default is None:
        # only eval.threshold is optional; it is a float when set
        return None if text.lower() in ("", "none") else _parse_scalar(text, 0.0, key)
    return _parse_scalar(text, default, key)


def apply_overrides(config: dict, pairs: dict[str, str], origin: str) -> dict:
    defaults = default_config()
    out = dict(config)
    for key, text in pairs.items():
        if key not in defaults:
            raise ConfigError(f"{origin}: unknown config key {key!r}")
        out[key] = parse_value(key, text, defaults[key])
    return out


def read_config_file(path) -> dict[str, str]:
    pairs = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        pairs[key.strip()] = value.strip()
    return pairs


def write_config_file(path, config: dict) -> None:
    lines = ["# effective configuration"]
    lines += [f"{k} = {format_value(config[k])}" for k in sorted(config)]
    Path(path).write_text("\n".join(lines) + "\n")


def section(config: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in config.items() if k.startswith(prefix)}


def _build(factory: Callable, kwargs: dict, what: str):
    try:
        return factory(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {what} settings: {exc}") from exc


def spectrogram_config(config: dict) -> SpectrogramConfig:
    return _build(SpectrogramConfig, section(config, "dsp"), "dsp")


def model_config(config: dict) -> ResNetConfig:
    return _build(ResNetConfig, section(config, "model"), "model")


def synth_config(config: dict) -> SynthConfig:
    kw = section(config, "synth")
    kw.pop("records")
    return _build(SynthConfig, kw, "synth")


def train_config(config: dict) -> TrainConfig:
    return _build(TrainConfig, dict(
        section(config, "train"),
        loss=_build(LossSpec, section(config, "loss"), "loss"),
        early_stopping=_build(EarlyStoppingConfig, section(config, "early_stopping"), "early_stopping"),
        plateau=_build(PlateauConfig, section(config, "plateau"), "plateau"),
        seed=config["seed"],
    ), "train")


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cache_path(path, name: str) -> Path:
    path = Path(path)
    return path / name if path.is_dir() else path


def _load_cache(path) -> SpectrogramSet:
    try:
        return read_cache(path)
    except FileNotFoundError as exc:
        raise IngestError(f"spectrogram cache not found: {path}") from exc


def _counts(y: np.ndarray) -> dict[str, int]:
    return {"apnea": int((y == 1).sum()), "non_apnea": int((y == 0).sum())}


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _check_input_shape(data: SpectrogramSet, mcfg: ResNetConfig, exc_type=ConfigError):
    h, w, _ = mcfg.input_shape
    if data.x.shape[1:] != (h, w):
        raise exc_type(f"spectrograms are {data.x.shape[1:]}, model expects {(h, w)}")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_synth(args, config: dict) -> int:
    out = _out_dir(args)
    n = config["synth.records"]
    try:
        records, annotations, split = generate_dataset(n, synth_config(config), config["seed"])
    except SynthError as exc:
        raise ConfigError(str(exc)) from exc
    write_dataset(out, records, annotations, split)
    write_config_file(out / CONFIG_FILE, config)
    print(f"wrote {n} records ({len(split.train_record_ids)} train, {len(split.test_record_ids)} test), "
          f"{len(annotations)} events to {out}")
    return EXIT_OK


def preprocess_directory(data_dir, config: dict) -> tuple[SpectrogramSet, SpectrogramSet, list, list]:
    data_dir = Path(data_dir)
    dcfg = section(config, "data")
    scfg = spectrogram_config(config)
    split = parse_split(data_dir / "split.csv")
    if not split.train_record_ids or not split.test_record_ids:
        raise IngestError(f"{data_dir / 'split.csv'}: need at least one train and one test record")
    annotations = parse_annotations(data_dir / "annotations.csv")
    records = load_records(data_dir, split.train_record_ids | split.test_record_ids)
    train_chunks, test_chunks = build_dataset(records, annotations, split, dcfg["chunk_seconds"],
                                              dcfg["apnea_labels"], dcfg["target_hz"])
    sets = []
    for chunks in (train_chunks, test_chunks):
        specs = spectrograms_for(chunks, scfg)
        sets.append((specs, SpectrogramSet.from_spectrograms(specs, scfg.n_mels, scfg.target_frames)))
    return sets[0][1], sets[1][1], sets[0][0], sets[1][0]


def cmd_preprocess(args, config: dict) -> int:
    out = _out_dir(args)
    scfg = spectrogram_config(config)
    train_set, test_set, train_specs, test_specs = preprocess_directory(args.data, config)
    write_cache(out / "train.apne", train_specs, scfg.n_mels, scfg.target_frames)
    write_cache(out / "test.apne", test_specs, scfg.n_mels, scfg.target_frames)
    counts = {"train": _counts(train_set.y), "test": _counts(test_set.y)}
    _write_json(out / "counts.json", counts)
    write_config_file(out / CONFIG_FILE, config)
    for role, c in counts.items():
        print(f"{role}: {c['apnea'] + c['non_apnea']} chunks ({c['apnea']} apnea, {c['non_apnea']} non-apnea)")
    return EXIT_OK


def run_training(data: SpectrogramSet, config: dict, out: Path):
    mcfg = model_config(config)
    tcfg = train_config(config)
    _check_input_shape(data, mcfg)
    result = train(data.x, data.y, tcfg, mcfg)
    save_weights(result.model, out / "weights.bin")
    with open(out / "history.jsonl", "w") as fh:
        for entry in result.history:
            fh.write(json.dumps(entry.to_dict()) + "\n")
    _write_json(out / "train_summary.json", {
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "class_weights": list(result.class_weights),
        "train_counts": result.train_counts,
        "balanced_counts": result.balanced_counts,
        "validation_counts": _counts(data.y[result.val_indices]),
    })
    write_config_file(out / CONFIG_FILE, config)
    return result


def cmd_train(args, config: dict) -> int:
    out = _out_dir(args)
    data = _load_cache(_cache_path(args.cache, "train.apne"))
    result = run_training(data, config, out)
    print(f"trained {len(result.history)} epochs, best epoch {result.best_epoch}; "
          f"weights in {out / 'weights.bin'}")
    return EXIT_OK


def choose_report(scores, labels, config: dict):
    """Fixed threshold if configured, else the sweep objective with a fallback.

    Returns the report and a description of how its threshold was chosen.
    """
    threshold = config["eval.threshold"]
    if threshold is not None:
        return evaluate_scores(scores, labels, threshold), "threshold"
    if labels.min() == labels.max():
        raise MetricsError("a threshold sweep needs both classes in the test set; pass --threshold")
    for text in (config["eval.objective"], config["eval.fallback"]):
        try:
            name, floor = parse_objective(text)
        except MetricsError as exc:
            raise ConfigError(str(exc)) from exc
        try:
            return threshold_sweep(scores, labels, name, floor), text
        except InfeasibleThresholdError as exc:
            log.warning("%s; falling back", exc)
    raise MetricsError("no objective produced a feasible threshold")


def _load_model_for(path, data: SpectrogramSet):
    try:
        model = load_weights(path)
    except FileNotFoundError as exc:
        raise ArtifactError(f"weight file not found: {path}") from exc
    _check_input_shape(data, model.config, ArtifactError)
    return model


def evaluate_model(model, data: SpectrogramSet, config: dict, out: Path):
    scores = model.predict(data.x)
    report, how = choose_report(scores, data.y, config)
    write_metrics_json(out / "metrics.json", report, objective=how, n_test=len(data))
    if data.y.any():
        write_pr_csv(out / "pr_curve.csv", pr_curve(scores, data.y))
    write_confusion_csv(out / "confusion.csv", report.confusion)
    write_config_file(out / CONFIG_FILE, config)
    return report, scores


def cmd_evaluate(args, config: dict) -> int:
    out = _out_dir(args)
    data = _load_cache(_cache_path(args.cache, "test.apne"))
    model = _load_model_for(args.weights, data)
    report, _ = evaluate_model(model, data, config, out)
    acc, prec, rec, f1 = report.percentages()
    print(f"threshold {report.threshold:.4f}: accuracy {acc:.2f}%, precision {prec:.2f}%, "
          f"recall {rec:.2f}%, F1 {f1:.2f}%, PR-AUC {report.pr_auc:.4f}")
    return EXIT_OK


def cmd_ablate(args, config: dict) -> int:
    out = _out_dir(args)
    cache = Path(args.cache)
    train_set = _load_cache(_cache_path(cache, "train.apne"))
    test_set = _load_cache(cache / "test.apne" if cache.is_dir() else Path(args.test_cache))
    mcfg = model_config(config)
    _check_input_shape(train_set, mcfg)
    runs = config["ablation.runs"]
    unknown = [r for r in runs if r not in RUNS]
    if unknown or not runs:
        raise ConfigError(f"unknown ablation runs {unknown}; choose from {', '.join(RUNS)}")
    rows = ablation_run(train_config(config), train_set.x, train_set.y, test_set.x, test_set.y,
                        mcfg, runs, config["ablation.threshold"])
    write_ablation_csv(out / "ablation.csv", rows)
    _write_json(out / "ablation_runs.json", [
        {"configuration": r.name, "metrics": r.report.to_dict(), **r.metadata} for r in rows])
    write_config_file(out / CONFIG_FILE, config)
    for r in rows:
        print(f"{r.name}: recall {100 * r.report.recall:.2f}%, precision {100 * r.report.precision:.2f}%")
    return EXIT_OK


def _run_label(path: Path) -> str:
    return path.parent.name if path.name == "metrics.json" else path.stem


def cmd_report(args, config: dict) -> int:
    out = _out_dir(args)
    rows = []
    for p in map(Path, args.metrics):
        try:
            report, raw = read_metrics_json(p)
        except FileNotFoundError as exc:
            raise IngestError(f"metrics file not found: {p}") from exc
        except (KeyError, ValueError) as exc:
            raise IngestError(f"{p}: not a metrics report ({exc})") from exc
        rows.append([_run_label(p), repr(report.threshold)] + [f"{v:.2f}" for v in report.percentages()]
                    + [format_value(report.pr_auc)])
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "threshold", "accuracy_pct", "precision_pct", "recall_pct", "f1_pct", "pr_auc"])
        w.writerows(rows)
    write_config_file(out / CONFIG_FILE, config)
    print(f"wrote {len(rows)} rows to {out / 'comparison.csv'}")
    return EXIT_OK


def cmd_replicate(args, config: dict) -> int:
    """Full pipeline on user-supplied converted recordings, reported beside the reference figures."""
    out = _out_dir(args)
    scfg = spectrogram_config(config)
    train_set, test_set, train_specs, test_specs = preprocess_directory(args.data, config)
    write_cache(out / "train.apne", train_specs, scfg.n_mels, scfg.target_frames)
    write_cache(out / "test.apne", test_specs, scfg.n_mels, scfg.target_frames)
    result = run_training(train_set, config, out)
    report, scores = evaluate_model(result.model, test_set, config, out)
    at_ref = evaluate_scores(scores, test_set.y, REFERENCE_THRESHOLD)
    with open(out / "replication.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "threshold", "accuracy_pct", "precision_pct", "recall_pct", "f1_pct"])
        w.writerow(["reference", REFERENCE_THRESHOLD] + [f"{REFERENCE_PERCENT[k]:.2f}"
                                                         for k in ("accuracy", "precision", "recall", "f1")])
        w.writerow(["this_run_at_reference_threshold", REFERENCE_THRESHOLD]
                   + [f"{v:.2f}" for v in at_ref.percentages()])
        w.writerow(["this_run_selected", repr(report.threshold)] + [f"{v:.2f}" for v in report.percentages()])
    print(f"test counts {_counts(test_set.y)}; reference recall {REFERENCE_PERCENT['recall']:.2f}%, "
          f"this run {100 * at_ref.recall:.2f}% at {REFERENCE_THRESHOLD}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

# dedicated flag -> config key
FLAG_KEYS = {
    "records": "synth.records",
    "loss": "loss.kind",
    "gamma": "loss.gamma",
    "alpha": "loss.alpha",
    "epochs": "train.epochs",
    "threshold": "eval.threshold",
    "objective": "eval.objective",
    "runs": "ablation.runs",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'section.key = value' file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", help="run-wide seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="apnea-screen",
                                     description="Respiratory-audio apnea screening pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--records")

    p = sub.add_parser("preprocess", parents=[common], help="audio + annotations -> spectrogram caches")
    p.add_argument("--data", required=True, help="directory with WAVs, annotations.csv, split.csv")

    p = sub.add_parser("train", parents=[common], help="train on train.apne")
    p.add_argument("--cache", required=True, help="train.apne or the directory holding it")
    p.add_argument("--loss", choices=("bce", "weighted_bce", "focal"))
    p.add_argument("--gamma")
    p.add_argument("--alpha")
    p.add_argument("--epochs")

    p = sub.add_parser("evaluate", parents=[common], help="score test.apne with trained weights")
    p.add_argument("--cache", required=True, help="test.apne or the directory holding it")
    p.add_argument("--weights", required=True)
    p.add_argument("--threshold", help="fixed decision threshold (skips the sweep)")
    p.add_argument("--objective", help="max_f1, recall_floor:R or precision_floor:P")

    p = sub.add_parser("ablate", parents=[common], help="retrain with mechanisms removed")
    p.add_argument("--cache", required=True, help="directory holding train.apne and test.apne")
    p.add_argument("--test-cache", help="test cache when --cache names a file")
    p.add_argument("--runs", help="comma-separated subset of " + ",".join(RUNS))
    p.add_argument("--epochs")

    p = sub.add_parser("report", parents=[common], help="tabulate metrics.json files")
    p.add_argument("metrics", nargs="+")

    p = sub.add_parser("replicate", parents=[common],
                       help="preprocess, train and evaluate user-supplied recordings")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs")
    return parser


def _parse_set(items) -> dict[str, str]:
    pairs = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value
    return pairs


def resolve_config(args) -> dict:
    config = default_config()
    if args.config:
        config = apply_overrides(config, read_config_file(args.config), args.config)
    config = apply_overrides(config, _parse_set(args.set), "--set")
    flags = {key: getattr(args, flag) for flag, key in FLAG_KEYS.items()
             if getattr(args, flag, None) is not None}
    if args.seed is not None:
        flags["seed"] = args.seed
    return apply_overrides(config, {k: str(v) for k, v in flags.items()}, "command line")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "replicate": cmd_replicate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except (ConfigError, SpectrogramError, ModelConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (WeightFileError, ArtifactError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (IngestError, CacheFormatError, TrainingError, MetricsError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
