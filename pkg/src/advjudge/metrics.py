"""Detection metrics with adversarial as the positive class."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidArgumentError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricSet:
    precision: float
    recall: float
    f1: float
    tpr: float
    tnr: float
    degenerate: list = field(default_factory=list)

    def to_json(self):
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tpr": self.tpr, "tnr": self.tnr, "degenerate": list(self.degenerate)}


def _as_binary(values):
    arr = np.asarray(values)
    if arr.dtype.kind in "US":
        bad = set(arr.tolist()) - {"adversarial", "benign"}
        if bad:
            raise InvalidArgumentError(f"unknown verdicts {sorted(bad)}")
        return arr == "adversarial"
    return arr.astype(bool)


def confusion(verdicts, truths):
    """Counts for binary verdicts against ground truth (1 / "adversarial" is positive)."""
    v, t = _as_binary(verdicts), _as_binary(truths)
    if v.shape != t.shape:
        raise InvalidArgumentError(f"{v.size} verdicts for {t.size} truths")
    return ConfusionCounts(int(np.sum(v & t)), int(np.sum(v & ~t)), int(np.sum(~v & ~t)), int(np.sum(~v & t)))


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def f1_score(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def precision_recall_f1(counts):
    flags = []
    p = _ratio(counts.tp, counts.tp + counts.fp, "precision", flags)
    r = _ratio(counts.tp, counts.tp + counts.fn, "recall", flags)
    tnr = _ratio(counts.tn, counts.tn + counts.fp, "tnr", flags)
    if p + r == 0:
        flags.append("f1")
    return MetricSet(p, r, f1_score(p, r), r, tnr, flags)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))

    @property
    def auc(self):
        return auc(self)


def roc_curve(scores, truths):
    """ROC points from sweeping every distinct score as a threshold, highest
    first; tied scores move together. The first point is (0, 0) at threshold
    +inf and the last is (1, 1)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = _as_binary(truths).ravel()
    if s.shape != t.shape or s.size == 0:
        raise InvalidArgumentError("scores and truths must be nonempty and equal in length")
    if t.all() or not t.any():
        raise InvalidArgumentError("ROC needs both classes")
    if np.isnan(s).any():
        raise InvalidArgumentError("NaN score")
    order = np.argsort(-s, kind="mergesort")
    s, t = s[order], t[order]
    # last index of each group of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(t)[ends]
    fp = np.cumsum(~t)[ends]
    tpr = np.r_[0.0, tp / t.sum()]
    fpr = np.r_[0.0, fp / (~t).sum()]
    return RocCurve(fpr, tpr, np.r_[np.inf, s[ends]])


def auc(curve):
    """Trapezoidal area under a ROC curve, given as :class:`RocCurve` or a
    sequence of ``(fpr, tpr)`` points."""
    if isinstance(curve, RocCurve):
        x, y = curve.fpr, curve.tpr
    else:
        pts = np.asarray(curve, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise InvalidArgumentError("a curve is a sequence of at least two (fpr, tpr) points")
        x, y = pts[:, 0], pts[:, 1]
    if np.any(np.diff(x) < 0):
        raise InvalidArgumentError("curve points must be sorted by FPR")
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2))


def accuracy(verdicts, truths):
    v, t = _as_binary(verdicts), _as_binary(truths)
    return float(np.mean(v == t)) if v.size else 0.0
