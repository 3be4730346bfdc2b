"""Normalized low-rank mixture distribution over (subject, predicate, object).

A rank-R model stores 3R raw score vectors.  Exponentiating each vector
gives the non-negative factor vectors of a CP decomposition; dividing by
the partition function turns the implied tensor into a probability
tensor without ever materializing it.  All arithmetic here is done in
log space so scores of magnitude up to several hundred stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .tensor3 import Shape3, TripletIndex


@dataclass(frozen=True)
class CpScores:
    """Raw score vectors, one (R, dim) matrix per variable.

    The component weights are absorbed into the vectors and never
    stored separately.
    """

    subj: np.ndarray  # (R, n_s)
    pred: np.ndarray  # (R, n_p)
    obj: np.ndarray  # (R, n_o)

    def __post_init__(self):
        for name in ("subj", "pred", "obj"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.ndim != 2:
                raise ValueError(f"{name} must be a (rank, dim) matrix")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, m)
        if not (self.subj.shape[0] == self.pred.shape[0] == self.obj.shape[0] >= 1):
            raise ValueError("all three score matrices must share the same rank >= 1")

    @property
    def rank(self) -> int:
        return self.subj.shape[0]

    @property
    def shape(self) -> Shape3:
        return Shape3(self.subj.shape[1], self.pred.shape[1], self.obj.shape[1])

    def vectors(self, variable: str) -> np.ndarray:
        return {"s": self.subj, "p": self.pred, "o": self.obj}[variable]


# Gradients carry one value per score entry, so they share the layout.
CpGrad = CpScores


def _component_log_masses(c: CpScores) -> np.ndarray:
    """log of the total mass of each rank-1 component, shape (R,)."""
    return (
        logsumexp(c.subj, axis=1)
        + logsumexp(c.pred, axis=1)
        + logsumexp(c.obj, axis=1)
    )


def log_partition(c: CpScores) -> float:
    """log Z = log sum_r prod_a sum_i exp(s_a_r_i), in O(R * (n_s+n_p+n_o))."""
    return float(logsumexp(_component_log_masses(c)))


def log_prob(c: CpScores, t: TripletIndex) -> float:
    t.check_within(c.shape)
    num = logsumexp(c.subj[:, t.i] + c.pred[:, t.j] + c.obj[:, t.k])
    return float(num - log_partition(c))


def nll_loss(c: CpScores, t: TripletIndex) -> float:
    return -log_prob(c, t)


def nll_gradient(c: CpScores, t: TripletIndex) -> CpGrad:
    """Exact gradient of nll_loss w.r.t. every score entry, tensor-free.

    For each variable the gradient is the marginal of the model
    distribution (under a per-component factorization) minus, at the
    observed index, the posterior over components given the observed
    triplet.  Cost is O(R * (n_s+n_p+n_o)).
    """
    t.check_within(c.shape)
    lse_s = logsumexp(c.subj, axis=1)
    lse_p = logsumexp(c.pred, axis=1)
    lse_o = logsumexp(c.obj, axis=1)
    log_z = float(logsumexp(lse_s + lse_p + lse_o))

    # Posterior over components given the observed triplet.
    comp_target = c.subj[:, t.i] + c.pred[:, t.j] + c.obj[:, t.k]
    q = np.exp(comp_target - logsumexp(comp_target))

    g_s = np.exp(c.subj + (lse_p + lse_o)[:, None] - log_z)
    g_p = np.exp(c.pred + (lse_s + lse_o)[:, None] - log_z)
    g_o = np.exp(c.obj + (lse_s + lse_p)[:, None] - log_z)
    g_s[:, t.i] -= q
    g_p[:, t.j] -= q
    g_o[:, t.k] -= q
    return CpGrad(g_s, g_p, g_o)


def mixture_weights(c: CpScores) -> np.ndarray:
    """Relative mass of each rank-1 component; non-negative, sums to 1."""
    masses = _component_log_masses(c)
    return np.exp(masses - logsumexp(masses))


def marginal(c: CpScores, variable: str) -> np.ndarray:
    """Distribution of one variable: the weight-averaged per-component softmax."""
    w = mixture_weights(c)
    scores = c.vectors(variable)
    sm = np.exp(scores - logsumexp(scores, axis=1, keepdims=True))
    return w @ sm


def _draw_categorical(rng: np.random.Generator, log_weights: np.ndarray) -> int:
    p = np.exp(log_weights - logsumexp(log_weights))
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random(), side="right"))
    return min(idx, p.size - 1)


def sample(c: CpScores, rng: np.random.Generator) -> TripletIndex:
    """Draw a triplet: component by mixture weight, then one index per variable."""
    masses = _component_log_masses(c)
    r = _draw_categorical(rng, masses)
    i = _draw_categorical(rng, c.subj[r])
    j = _draw_categorical(rng, c.pred[r])
    k = _draw_categorical(rng, c.obj[r])
    return TripletIndex(i, j, k)


def dense_log_prob(c: CpScores) -> np.ndarray:
    """Materialize the full log-probability tensor (small shapes only)."""
    joint = (
        c.subj[:, :, None, None]
        + c.pred[:, None, :, None]
        + c.obj[:, None, None, :]
    )
    return logsumexp(joint, axis=0) - log_partition(c)
