"""AUC (Mann-Whitney, ties count half) and clamped logloss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .numerics import bce


class SingleClassError(ValueError):
    """AUC is undefined without at least one positive and one negative."""


def auc(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"need both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    if len(s) == 0:
        raise ValueError("logloss of an empty set")
    return float(np.mean(bce(s, labels)))


@dataclass
class EvalReport:
    auc: float
    logloss: float
    n_pos: int
    n_neg: int
    auc_defined: bool = True
    epoch: int | None = None
    step: int | None = None
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        if not self.auc_defined:
            d["auc"] = None
        return d


def evaluate_scores(scores, labels, epoch: int | None = None, step: int | None = None) -> EvalReport:
    y = np.asarray(labels)
    try:
        a, ok = auc(scores, y), True
    except SingleClassError:
        a, ok = math.nan, False
    n_pos = int(np.sum(y == 1))
    return EvalReport(a, logloss(scores, y), n_pos, len(y) - n_pos, ok, epoch, step)


def evaluate(tower, part, epoch: int | None = None, step: int | None = None) -> EvalReport:
    """Score a partition with a frozen tower (its ``predict``)."""
    return evaluate_scores(tower.predict(part), part.labels, epoch, step)
