"""Unconditional triplet frequency prior with add-1 smoothing.

Counts are kept sparse; at realistic label-set sizes only a small
fraction of cells is ever observed.  The smoothed value of any cell is
(count + 1) / total_smoothed, so unseen triplets keep strictly positive
probability and a product with the conditional distribution never
zeroes them outright.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cpdist
from .tensor3 import Shape3, ShapeError, TripletIndex


@dataclass(frozen=True)
class PriorTensor:
    shape: Shape3
    counts: dict[TripletIndex, int] = field(default_factory=dict)

    def __post_init__(self):
        self.shape.validate()
        for t, n in self.counts.items():
            t.check_within(self.shape)
            if n < 1:
                raise ValueError(f"stored count for {t} must be >= 1, got {n}")

    @property
    def total_smoothed(self) -> float:
        return float(sum(self.counts.values()) + self.shape.size)

    def count(self, t: TripletIndex) -> int:
        return self.counts.get(t, 0)


def build_prior(annotations, shape: Shape3) -> PriorTensor:
    counts: dict[TripletIndex, int] = {}
    for t in annotations:
        t = TripletIndex(*t)
        t.check_within(shape)
        counts[t] = counts.get(t, 0) + 1
    return PriorTensor(shape, counts)


def prior_log_value(p: PriorTensor, t: TripletIndex) -> float:
    t.check_within(p.shape)
    return float(np.log(p.count(t) + 1) - np.log(p.total_smoothed))


def fuse(c: cpdist.CpScores, p: PriorTensor, t: TripletIndex) -> float:
    """Unnormalized log score: conditional log-prob plus prior log-value.

    Used for ranking only; the product of the two normalized factors is
    not itself renormalized.
    """
    if c.shape != p.shape:
        raise ShapeError(f"shape mismatch: scores {c.shape} vs prior {p.shape}")
    return cpdist.log_prob(c, t) + prior_log_value(p, t)


def dense_log_prior(p: PriorTensor) -> np.ndarray:
    """Materialize log prior values for every cell (small shapes only)."""
    arr = np.ones(p.shape, dtype=np.float64)
    for t, n in p.counts.items():
        arr[t.i, t.j, t.k] += n
    return np.log(arr) - np.log(p.total_smoothed)
