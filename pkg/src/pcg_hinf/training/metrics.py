from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Metrics:
    f1: float
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_counts(scores, labels, tau: float) -> ConfusionCounts:
    """Counts with the rule: predict abnormal when score >= tau."""
    pred = np.asarray(scores).reshape(-1) >= tau
    y = np.asarray(labels).reshape(-1).astype(bool)
    return ConfusionCounts(tp=int(np.sum(pred & y)), fp=int(np.sum(pred & ~y)),
                           fn=int(np.sum(~pred & y)), tn=int(np.sum(~pred & ~y)))


def _ratio(num, den):
    return num / den if den else 0.0


def compute_metrics(c: ConfusionCounts) -> Metrics:
    """F1, accuracy, sensitivity, specificity; every 0/0 ratio is taken as 0."""
    if c.total <= 0:
        raise ValueError("cannot compute metrics on zero samples")
    sens = _ratio(c.tp, c.tp + c.fn)
    spec = _ratio(c.tn, c.tn + c.fp)
    prec = _ratio(c.tp, c.tp + c.fp)
    f1 = _ratio(2 * prec * sens, prec + sens)
    return Metrics(f1=f1, accuracy=(c.tp + c.tn) / c.total, sensitivity=sens,
                   specificity=spec, precision=prec)


def f1_at(scores, labels, tau: float) -> float:
    return compute_metrics(confusion_counts(scores, labels, tau)).f1
