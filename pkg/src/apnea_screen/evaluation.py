"""Thresholded metrics, precision-recall curves and threshold selection.

Apnea is the positive class everywhere and a chunk is flagged when its score
is at or above the threshold.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


class MetricsError(ValueError):
    pass


class InfeasibleThresholdError(MetricsError):
    """No candidate threshold satisfies the requested floor."""


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise MetricsError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


@dataclass(frozen=True)
class MetricsReport:
    threshold: float
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    pr_auc: float = float("nan")

    def to_dict(self) -> dict:
        out = {"threshold": self.threshold}
        out.update(asdict(self.confusion))
        out.update(accuracy=self.accuracy, precision=self.precision, recall=self.recall,
                   f1=self.f1, pr_auc=self.pr_auc)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        cm = ConfusionMatrix(int(d["tp"]), int(d["fn"]), int(d["fp"]), int(d["tn"]))
        return cls(float(d["threshold"]), cm, float(d["accuracy"]), float(d["precision"]),
                   float(d["recall"]), float(d["f1"]), _float_or_nan(d.get("pr_auc")))

    def percentages(self) -> tuple[float, float, float, float]:
        return tuple(100.0 * v for v in (self.accuracy, self.precision, self.recall, self.f1))


def _float_or_nan(value) -> float:
    return float("nan") if value is None else float(value)


@dataclass(frozen=True)
class PRCurve:
    """One (recall, precision) point per distinct score, thresholds descending."""

    thresholds: np.ndarray
    recall: np.ndarray
    precision: np.ndarray

    @property
    def anchor(self) -> tuple[float, float]:
        # (recall 0, precision at the highest threshold)
        return 0.0, float(self.precision[0])

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def _as_pair(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise MetricsError(f"{len(scores)} scores but {len(labels)} labels")
    if scores.size == 0:
        raise MetricsError("no samples")
    if not np.isin(labels, (0, 1)).all():
        raise MetricsError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion_at_threshold(scores, labels, threshold: float) -> ConfusionMatrix:
    scores, labels = _as_pair(scores, labels)
    flagged = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int((flagged & pos).sum()),
        fn=int((~flagged & pos).sum()),
        fp=int((flagged & ~pos).sum()),
        tn=int((~flagged & ~pos).sum()),
    )


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def derive_metrics(cm: ConfusionMatrix, threshold: float = float("nan"),
                   pr_auc: float = float("nan")) -> MetricsReport:
    """Accuracy, precision, recall and F1; any zero denominator yields 0."""
    if cm.total == 0:
        raise MetricsError("empty confusion matrix")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(threshold, cm, (cm.tp + cm.tn) / cm.total, precision, recall, f1, pr_auc)


def pr_curve(scores, labels) -> PRCurve:
    scores, labels = _as_pair(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricsError("precision-recall curve needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(l)[ends]
    flagged = ends + 1
    return PRCurve(thresholds=s[ends], recall=tp / n_pos, precision=tp / flagged)


def pr_auc(curve: PRCurve) -> float:
    """Trapezoidal area under precision over recall, starting at the anchor."""
    r = np.r_[0.0, curve.recall]
    p = np.r_[curve.anchor[1], curve.precision]
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def evaluate_scores(scores, labels, threshold: float) -> MetricsReport:
    cm = confusion_at_threshold(scores, labels, threshold)
    auc = pr_auc(pr_curve(scores, labels)) if np.any(np.asarray(labels) == 1) else float("nan")
    return derive_metrics(cm, threshold, auc)


def parse_objective(text: str) -> tuple[str, float | None]:
    """``max_f1``, ``recall_floor:0.9`` or ``precision_floor:0.5``."""
    name, _, value = text.partition(":")
    if name == "max_f1" and not value:
        return name, None
    if name in ("recall_floor", "precision_floor") and value:
        try:
            return name, float(value)
        except ValueError:
            pass
    raise MetricsError(f"unknown threshold objective {text!r}")


def threshold_sweep(scores, labels, objective: str = "max_f1",
                    floor: float | None = None) -> MetricsReport:
    """Pick a threshold among the distinct scores.

    ``max_f1`` maximises F1. ``recall_floor`` keeps thresholds with recall of
    at least ``floor`` and maximises F1 among them; ``precision_floor`` keeps
    thresholds with precision of at least ``floor`` and maximises recall.
    Ties go to the higher threshold.

    Raises
    ------
    InfeasibleThresholdError
        If no threshold meets the floor.
    """
    scores, labels = _as_pair(scores, labels)
    if labels.min() == labels.max():
        raise MetricsError("threshold sweep needs both classes")
    curve = pr_curve(scores, labels)
    auc = pr_auc(curve)
    reports = [derive_metrics(confusion_at_threshold(scores, labels, t), float(t), auc)
               for t in curve.thresholds]

    if objective == "max_f1":
        feasible, key = reports, (lambda r: r.f1)
    elif objective == "recall_floor":
        feasible, key = [r for r in reports if r.recall >= floor], (lambda r: r.f1)
    elif objective == "precision_floor":
        feasible, key = [r for r in reports if r.precision >= floor], (lambda r: r.recall)
    else:
        raise MetricsError(f"unknown objective {objective!r}")
    if not feasible:
        raise InfeasibleThresholdError(f"no feasible threshold for {objective} >= {floor}")
    # reports run from highest threshold down, so max() keeps the first (highest) on ties
    return max(feasible, key=key)


# --------------------------------------------------------------------------
# Report files
# --------------------------------------------------------------------------


def write_metrics_json(path, report: MetricsReport, **extra) -> None:
    """Report fields then ``extra``; NaN (undefined PR-AUC) is written as null."""
    payload = report.to_dict()
    payload.update(extra)
    payload = {k: None if isinstance(v, float) and v != v else v for k, v in payload.items()}
    Path(path).write_text(json.dumps(payload, indent=2, allow_nan=False) + "\n")


def read_metrics_json(path) -> tuple[MetricsReport, dict]:
    data = json.loads(Path(path).read_text())
    return MetricsReport.from_dict(data), data


def write_pr_csv(path, curve: PRCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "recall", "precision"])
        for t, r, p in zip(curve.thresholds, curve.recall, curve.precision):
            w.writerow([repr(float(t)), repr(float(r)), repr(float(p))])


def write_confusion_csv(path, cm: ConfusionMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["actual", "predicted_apnea", "predicted_non_apnea"])
        w.writerow(["apnea", cm.tp, cm.fn])
        w.writerow(["non_apnea", cm.fp, cm.tn])
