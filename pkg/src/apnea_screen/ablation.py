"""Retrain with one balancing or regularisation mechanism removed and compare."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .evaluation import MetricsReport, evaluate_scores
from .model import ResNetConfig
from .training import TrainConfig, derive_seed, train, without_regularization

log = logging.getLogger(__name__)

RUNS = ("full", "no_class_weighting", "no_oversampling", "no_regularization")
CSV_HEADER = ["configuration", "accuracy_pct", "precision_pct", "recall_pct", "f1_pct"]


@dataclass
class AblationRow:
    name: str
    report: MetricsReport
    metadata: dict = field(default_factory=dict)


def run_configs(name: str, base: TrainConfig, model_config: ResNetConfig):
    if name == "full":
        cfg, mcfg = base, model_config
    elif name == "no_class_weighting":
        cfg, mcfg = replace(base, class_weighting=False), model_config
    elif name == "no_oversampling":
        cfg, mcfg = replace(base, oversample=False), model_config
    elif name == "no_regularization":
        cfg, mcfg = without_regularization(base, model_config)
    else:
        raise ValueError(f"unknown ablation run {name!r}; choose from {RUNS}")
    return replace(cfg, seed=derive_seed(base.seed, name)), mcfg


def ablation_run(base_config: TrainConfig, train_x: np.ndarray, train_y: np.ndarray,
                 test_x: np.ndarray, test_y: np.ndarray,
                 model_config: ResNetConfig = ResNetConfig(),
                 runs: Iterable[str] = RUNS, threshold: float = 0.5) -> list[AblationRow]:
    """Train and score each requested configuration on the same data.

    Every run gets its own seed derived from the base seed and the run name,
    and is scored on the untouched test set at a fixed ``threshold``.
    """
    runs = list(runs)
    for name in runs:
        run_configs(name, base_config, model_config)  # validate names up front
    rows = []
    for name in runs:
        cfg, mcfg = run_configs(name, base_config, model_config)
        log.info("ablation run %s", name)
        result = train(train_x, train_y, cfg, mcfg)
        scores = result.model.predict(test_x)
        report = evaluate_scores(scores, test_y, threshold)
        rows.append(AblationRow(name, report, {
            "seed": cfg.seed,
            "oversample": cfg.oversample,
            "class_weighting": cfg.class_weighting,
            "early_stopping": cfg.early_stopping.enabled,
            "plateau": cfg.plateau.enabled,
            "dropout_rate": mcfg.dropout_rate,
            "train_counts": result.train_counts,
            "balanced_counts": result.balanced_counts,
            "class_weights": list(result.class_weights),
            "epochs_run": len(result.history),
            "best_epoch": result.best_epoch,
        }))
    return rows


def write_ablation_csv(path, rows: Iterable[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow([row.name] + [f"{v:.2f}" for v in row.report.percentages()])
