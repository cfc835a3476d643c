"""Classification metrics and the rounds-to-target measurement."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import MetricsError


def rounds_to_target(trace: Sequence[float], target: float) -> int | None:
    """1-based index of the first round with accuracy >= target, else None."""
    if len(trace) == 0:
        raise ValueError("accuracy trace is empty")
    for i, acc in enumerate(trace):
        if acc >= target:
            return i + 1
    return None


@dataclass
class MetricsReport:
    balanced_accuracy: float
    accuracy: float
    recall: float
    kappa: float
    auc: float
    runtime_seconds: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(labels, predictions, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    k = num_classes or int(max(y.max(), p.max())) + 1
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def cohen_kappa(cm: np.ndarray) -> float:
    n = cm.sum()
    p_o = np.trace(cm) / n
    p_e = float(np.sum(cm.sum(axis=1) * cm.sum(axis=0))) / (n * n)
    if p_e == 1.0:
        raise MetricsError("kappa is undefined when expected agreement is 1")
    return float((p_o - p_e) / (1.0 - p_e))


def roc_curve(y_true, scores) -> tuple[np.ndarray, np.ndarray]:
    """False/true positive rates over all distinct thresholds, starting at (0, 0)."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise MetricsError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]   # end of each tie group
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return np.r_[0.0, fp / neg], np.r_[0.0, tp / pos]


def binary_auc(y_true, scores) -> float:
    fpr, tpr = roc_curve(y_true, scores)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def macro_auc(labels, scores) -> float:
    """One-vs-rest trapezoidal AUC averaged over classes present in ``labels``."""
    y = np.asarray(labels, dtype=np.int64)
    S = np.asarray(scores, dtype=np.float64)
    classes = np.unique(y)
    if classes.size < 2:
        raise MetricsError("AUC is undefined for a single-class label set")
    return float(np.mean([binary_auc(y == c, S[:, c]) for c in classes]))


def metrics_report(predictions, labels, scores, runtime: float = 0.0,
                   num_classes: int | None = None) -> MetricsReport:
    """Balanced accuracy averages recall over classes present in ``labels``;
    ``recall`` averages over classes present in labels or predictions."""
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    S = np.asarray(scores, dtype=np.float64)
    if not (len(y) == len(p) == len(S)):
        raise ValueError("predictions, labels and scores differ in length")
    if np.any(np.abs(S.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("score rows must sum to 1 within 1e-6")
    if np.unique(y).size < 2:
        raise MetricsError("kappa and AUC are undefined for a single-class label set")
    k = num_classes or S.shape[1]
    cm = confusion_matrix(y, p, k)
    support = cm.sum(axis=1)
    per_class = np.divide(np.diag(cm), support, out=np.zeros(k), where=support > 0)
    present = support > 0
    union = present | (cm.sum(axis=0) > 0)
    return MetricsReport(
        balanced_accuracy=float(per_class[present].mean()),
        accuracy=float(np.trace(cm) / cm.sum()),
        recall=float(per_class[union].mean()),
        kappa=cohen_kappa(cm),
        auc=macro_auc(y, S),
        runtime_seconds=float(runtime),
    )
