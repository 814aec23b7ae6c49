"""Confusion matrices and the six-metric evaluation suite.

All metrics are computed from integer confusion counts: binary and multiclass
Matthews correlation (the multiclass form is the Gorodkin R_K generalization),
accuracy, support-weighted F1 / precision / recall, and Cohen's kappa.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Square count grid: rows are actual classes, columns predicted."""

    counts: np.ndarray
    classes: tuple[str, ...]

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DataError("confusion matrix must be square")
        if counts.shape[0] != len(self.classes):
            raise DataError("one row/column per class required")
        if (counts < 0).any():
            raise DataError("confusion counts must be non-negative")
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> list[int]:
        return [int(v) for v in self.counts.sum(axis=1)]

    def col_sums(self) -> list[int]:
        return [int(v) for v in self.counts.sum(axis=0)]


@dataclass(frozen=True)
class MetricSuite:
    mcc: float
    accuracy: float
    f1_weighted: float
    precision_weighted: float
    recall_weighted: float
    cohens_kappa: float

    def as_dict(self) -> dict[str, float]:
        return {
            "mcc": self.mcc,
            "accuracy": self.accuracy,
            "f1_weighted": self.f1_weighted,
            "precision_weighted": self.precision_weighted,
            "recall_weighted": self.recall_weighted,
            "cohens_kappa": self.cohens_kappa,
        }


def confusion(
    y_true: Sequence[int] | np.ndarray,
    y_pred: Sequence[int] | np.ndarray,
    classes: Sequence[str],
) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError("y_true and y_pred must have equal length")
    k = len(classes)
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise DataError(f"{name} contains a label outside the class list")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts=counts, classes=tuple(classes))


def mcc(cm: ConfusionMatrix) -> float:
    """Matthews correlation; 0 (with a warning) on degenerate marginals.

    The binary path uses the classic TP/TN/FP/FN formula with the second
    class as positive; k > 2 uses the Gorodkin R_K form. Both agree on
    2x2 input.
    """
    c = cm.counts
    if len(cm.classes) == 2:
        tn, fp = int(c[0, 0]), int(c[0, 1])
        fn, tp = int(c[1, 0]), int(c[1, 1])
        den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        if den == 0:
            warnings.warn("degenerate confusion matrix, MCC set to 0", stacklevel=2)
            return 0.0
        return _ratio(tp * tn - fp * fn, den)
    return mcc_gorodkin(cm)


def mcc_gorodkin(cm: ConfusionMatrix) -> float:
    """R_K multiclass correlation; equals the binary MCC on 2x2 input."""
    c = cm.counts
    n = cm.total
    diag = sum(int(c[k, k]) for k in range(len(cm.classes)))
    rows = cm.row_sums()
    cols = cm.col_sums()
    num = diag * n - sum(r * p for r, p in zip(rows, cols))
    d_pred = n * n - sum(p * p for p in cols)
    d_true = n * n - sum(r * r for r in rows)
    if d_pred == 0 or d_true == 0:
        warnings.warn("degenerate confusion matrix, MCC set to 0", stacklevel=2)
        return 0.0
    return _ratio(num, d_pred * d_true)


def _ratio(num: int, den_squared: int) -> float:
    """num / sqrt(den_squared) with exact +-1 on perfect correlation."""
    if num * num == den_squared:
        return math.copysign(1.0, num)
    return num / math.sqrt(den_squared)


def suite(cm: ConfusionMatrix) -> MetricSuite:
    """Compute the full metric suite from one confusion matrix."""
    n = cm.total
    if n == 0:
        raise DataError("cannot compute metrics of an empty confusion matrix")
    k = len(cm.classes)
    c = cm.counts
    rows = cm.row_sums()
    cols = cm.col_sums()
    accuracy = sum(int(c[i, i]) for i in range(k)) / n

    f1_w = prec_w = rec_w = 0.0
    for i in range(k):
        tp = int(c[i, i])
        prec = tp / cols[i] if cols[i] else 0.0
        rec = tp / rows[i] if rows[i] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        weight = rows[i] / n
        prec_w += weight * prec
        rec_w += weight * rec
        f1_w += weight * f1

    p_e = sum(r * p for r, p in zip(rows, cols)) / (n * n)
    if p_e == 1.0:
        warnings.warn("degenerate marginals, Cohen's kappa set to 0", stacklevel=2)
        kappa = 0.0
    else:
        kappa = (accuracy - p_e) / (1.0 - p_e)

    return MetricSuite(
        mcc=mcc(cm),
        accuracy=accuracy,
        f1_weighted=f1_w,
        precision_weighted=prec_w,
        recall_weighted=rec_w,
        cohens_kappa=kappa,
    )
