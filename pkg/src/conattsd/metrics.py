"""Precision / recall / F1 with support-weighted averaging over the two classes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ContractError

CLASSES = (0, 1)


def _pct(x: Fraction) -> float:
    """Exact fraction to a percentage with two decimals, ties rounded up."""
    return math.floor(x * 10000 + Fraction(1, 2)) / 100


@dataclass(frozen=True)
class MetricReport:
    """All scores are percentages rounded to two decimals.

    ``confusion[true][pred]`` counts evaluated targets.
    """

    precision: float
    recall: float
    f1: float
    per_class: dict
    confusion: tuple[tuple[int, int], tuple[int, int]]
    support: tuple[int, int]

    @property
    def n(self) -> int:
        return self.support[0] + self.support[1]

    @property
    def accuracy(self) -> float:
        return _pct(Fraction(self.confusion[0][0] + self.confusion[1][1], self.n))

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "confusion": [list(r) for r in self.confusion],
            "support": list(self.support),
        }


def compute_metrics(predictions, labels) -> MetricReport:
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    gold = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != gold.shape:
        raise ContractError(f"{pred.size} predictions vs {gold.size} labels")
    if pred.size == 0:
        raise ContractError("cannot score an empty prediction set")
    if not (np.isin(pred, CLASSES).all() and np.isin(gold, CLASSES).all()):
        raise ContractError("predictions and labels must be 0 or 1")
    cm = np.bincount(gold * 2 + pred, minlength=4).reshape(2, 2)
    n = int(cm.sum())
    per_class = {}
    totals = [Fraction(0)] * 3
    for c in CLASSES:
        tp = int(cm[c, c])
        predicted = int(cm[:, c].sum())
        actual = int(cm[c, :].sum())
        p = Fraction(tp, predicted) if predicted else Fraction(0)
        r = Fraction(tp, actual) if actual else Fraction(0)
        denom = predicted + actual
        f = Fraction(2 * tp, denom) if denom else Fraction(0)
        per_class[c] = {"precision": _pct(p), "recall": _pct(r), "f1": _pct(f), "support": actual}
        for k, value in enumerate((p, r, f)):
            totals[k] += value * actual
    weighted = [t / n for t in totals]
    return MetricReport(
        precision=_pct(weighted[0]),
        recall=_pct(weighted[1]),
        f1=_pct(weighted[2]),
        per_class=per_class,
        confusion=((int(cm[0, 0]), int(cm[0, 1])), (int(cm[1, 0]), int(cm[1, 1]))),
        support=(int(cm[0].sum()), int(cm[1].sum())),
    )
