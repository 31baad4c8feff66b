"""Confusion matrix and the evaluation metrics reported by the toolkit.

Classes are 1-based everywhere in this module; label 0 (unlabeled) must
be filtered out before accumulation.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, UndefinedMetricError


class ConfusionMatrix:
    """n x n count table, rows = true class, columns = predicted class."""

    def __init__(self, n_classes: int):
        if n_classes < 1:
            raise DataError(f"confusion matrix needs at least 1 class, got {n_classes}")
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def trace(self) -> int:
        return int(np.trace(self.counts))

    def _check(self, value: int, name: str) -> int:
        value = int(value)
        if not 1 <= value <= self.n_classes:
            raise DataError(f"{name} class {value} outside [1, {self.n_classes}]")
        return value

    def add(self, true: int, pred: int, count: int = 1) -> "ConfusionMatrix":
        self.counts[self._check(true, "true") - 1, self._check(pred, "predicted") - 1] += count
        return self

    def add_batch(self, true: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        true = np.asarray(true)
        pred = np.asarray(pred)
        if true.shape != pred.shape:
            raise DataError(f"label arrays differ in shape: {true.shape} vs {pred.shape}")
        if true.size:
            for name, arr in (("true", true), ("predicted", pred)):
                if arr.min() < 1 or arr.max() > self.n_classes:
                    raise DataError(f"{name} class outside [1, {self.n_classes}]")
            np.add.at(self.counts, (true - 1, pred - 1), 1)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise DataError(
                f"cannot merge {other.n_classes}-class matrix into {self.n_classes}-class one"
            )
        self.counts += other.counts
        return self


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of evaluated samples on the diagonal."""
    if cm.total == 0:
        raise UndefinedMetricError("overall accuracy of an empty confusion matrix")
    return cm.trace / cm.total


def per_class_accuracy(cm: ConfusionMatrix) -> list[float | None]:
    """Recall per class; None where the class has no evaluated samples."""
    rows = cm.counts.sum(axis=1)
    out: list[float | None] = []
    for c in range(cm.n_classes):
        out.append(float(cm.counts[c, c] / rows[c]) if rows[c] > 0 else None)
    return out


def average_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class accuracy; classes with no samples are excluded with a warning."""
    per_class = per_class_accuracy(cm)
    present = [v for v in per_class if v is not None]
    if not present:
        raise UndefinedMetricError("average accuracy of an empty confusion matrix")
    missing = [str(c + 1) for c, v in enumerate(per_class) if v is None]
    if missing:
        warnings.warn(
            f"average accuracy excludes classes with no samples: {', '.join(missing)}",
            stacklevel=2,
        )
    return float(np.mean(present))


def kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa: observed agreement corrected by chance agreement.

    When chance agreement is exactly 1 (all mass in a single row and
    column) the ratio is 0/0; it is defined as 1.0 for perfect observed
    agreement and 0.0 otherwise.
    """
    total = cm.total
    if total == 0:
        raise UndefinedMetricError("kappa of an empty confusion matrix")
    p_observed = cm.trace / total
    rows = cm.counts.sum(axis=1).astype(np.float64)
    cols = cm.counts.sum(axis=0).astype(np.float64)
    p_expected = float((rows * cols).sum()) / (total * total)
    if p_expected == 1.0:
        return 1.0 if p_observed == 1.0 else 0.0
    return (p_observed - p_expected) / (1.0 - p_expected)


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    per_class: list[float | None]
    oa: float
    aa: float
    kappa: float
    wall_seconds: float


def evaluate(cm: ConfusionMatrix, wall_seconds: float = 0.0) -> EvalReport:
    """Bundle all metrics for one confusion matrix."""
    return EvalReport(
        confusion=cm,
        per_class=per_class_accuracy(cm),
        oa=overall_accuracy(cm),
        aa=average_accuracy(cm),
        kappa=kappa(cm),
        wall_seconds=wall_seconds,
    )


def report_json(report: EvalReport) -> str:
    payload = {
        "confusion": report.confusion.counts.tolist(),
        "per_class": report.per_class,
        "oa": report.oa,
        "aa": report.aa,
        "kappa": report.kappa,
        "wall_seconds": report.wall_seconds,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def report_text(report: EvalReport, class_names: list[str] | None = None) -> str:
    """Aligned table: one row per class, then kappa, OA, AA, and time."""

    def name(c: int) -> str:
        if class_names is not None and c <= len(class_names):
            return class_names[c - 1]
        return f"class {c}"

    rows: list[tuple[str, str]] = []
    for c in range(1, report.confusion.n_classes + 1):
        value = report.per_class[c - 1]
        rows.append((name(c), "n/a" if value is None else f"{100.0 * value:.2f}%"))
    rows.append(("Kappa", f"{report.kappa:.4f}"))
    rows.append(("OA", f"{100.0 * report.oa:.2f}%"))
    rows.append(("AA", f"{100.0 * report.aa:.2f}%"))
    rows.append(("Time (s)", f"{report.wall_seconds:.2f}"))
    left = max(len(r[0]) for r in rows)
    right = max(len(r[1]) for r in rows)
    lines = [f"{label:<{left}}  {value:>{right}}" for label, value in rows]
    return "\n".join(lines) + "\n"
