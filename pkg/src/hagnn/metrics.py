"""Classification metrics for the stable/converter task."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .cohort import CONVERTER, Diagnosis, Subject

__all__ = [
    "UndefinedMetricError", "balanced_accuracy", "accuracy", "auc_roc", "roc_curve",
    "conversion_accuracy", "TRANSITIONS",
]

TRANSITIONS = {
    "cn_to_mci": (Diagnosis.CN, Diagnosis.MCI),
    "mci_to_ad": (Diagnosis.MCI, Diagnosis.AD),
}


class UndefinedMetricError(ValueError):
    """The evaluated set lacks the classes the metric needs."""


def _binary(labels, name="labels") -> np.ndarray:
    arr = np.asarray(labels).astype(int).reshape(-1)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary 0/1")
    return arr


def accuracy(predictions, labels) -> float:
    p, y = _binary(predictions, "predictions"), _binary(labels)
    if p.size != y.size or y.size == 0:
        raise ValueError("predictions and labels must be non-empty and of equal length")
    return float(np.mean(p == y))


def balanced_accuracy(predictions, labels) -> float:
    """Mean of sensitivity and specificity."""
    p, y = _binary(predictions, "predictions"), _binary(labels)
    if p.size != y.size:
        raise ValueError("predictions and labels differ in length")
    pos, neg = y == 1, y == 0
    if not pos.any() or not neg.any():
        raise UndefinedMetricError("balanced accuracy needs both classes in the labels")
    sens = np.mean(p[pos] == 1)
    tnr = np.mean(p[neg] == 0)
    return float((sens + tnr) / 2.0)


def auc_roc(scores, labels) -> float:
    """Mann-Whitney form: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels)
    if s.size != y.size:
        raise ValueError("scores and labels differ in length")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs both classes in the labels")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    upto = np.searchsorted(neg_sorted, pos, side="right")
    wins = below.sum() + 0.5 * (upto - below).sum()
    return float(wins / (pos.size * neg.size))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds); a point per distinct score, starting at (0, 0)
    with threshold +inf."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes in the labels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thr = np.r_[np.inf, s[last]]
    return fpr, tpr, thr


def conversion_accuracy(predictions, subjects: Sequence[Subject], transition: str) -> float:
    """Fraction of subjects with the given last-two-visit transition that are
    predicted converter."""
    src, dst = TRANSITIONS[transition]
    p = _binary(predictions, "predictions")
    if p.size != len(subjects):
        raise ValueError("one prediction per subject is required")
    hits = [pi for pi, s in zip(p, subjects)
            if s.label == CONVERTER and s.transition == (src, dst)]
    if not hits:
        raise UndefinedMetricError(f"no {transition} subjects in the evaluated set")
    return float(np.mean(hits))
