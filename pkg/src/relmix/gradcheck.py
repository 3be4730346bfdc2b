"""Central finite-difference checks for the analytic gradients.

Relative error here means the largest absolute deviation divided by the
largest finite-difference gradient magnitude, the usual scale-aware
gradcheck normalization (tiny individual entries would otherwise make
purely floating-point noise look like disagreement).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cpdist, network
from .cpdist import CpScores
from .tensor3 import Shape3, TripletIndex


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error_scores: float
    max_rel_error_params: float
    instances: int

    def passed(self, score_tol: float = 1e-6, param_tol: float = 1e-5) -> bool:
        return (
            self.max_rel_error_scores <= score_tol
            and self.max_rel_error_params <= param_tol
        )


def fd_score_gradient(c: CpScores, t: TripletIndex, h: float = 1e-5) -> cpdist.CpGrad:
    """Numeric gradient of nll_loss w.r.t. every score entry."""
    mats = {"subj": c.subj.copy(), "pred": c.pred.copy(), "obj": c.obj.copy()}
    grads = {}
    for name in mats:
        g = np.zeros_like(mats[name])
        for idx in np.ndindex(*mats[name].shape):
            for sign in (+1.0, -1.0):
                mats[name][idx] += sign * h
                val = cpdist.nll_loss(CpScores(mats["subj"], mats["pred"], mats["obj"]), t)
                g[idx] += sign * val
                mats[name][idx] -= sign * h
        grads[name] = g / (2.0 * h)
    return cpdist.CpGrad(grads["subj"], grads["pred"], grads["obj"])


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


def random_scores(rng: np.random.Generator, shape: Shape3, rank: int, spread: float = 2.0) -> CpScores:
    return CpScores(
        rng.normal(scale=spread, size=(rank, shape.n_s)),
        rng.normal(scale=spread, size=(rank, shape.n_p)),
        rng.normal(scale=spread, size=(rank, shape.n_o)),
    )


def random_triplet(rng: np.random.Generator, shape: Shape3) -> TripletIndex:
    return TripletIndex(
        int(rng.integers(shape.n_s)),
        int(rng.integers(shape.n_p)),
        int(rng.integers(shape.n_o)),
    )


def check_score_gradients(
    instances: int,
    max_dims: tuple[int, int, int] = (6, 5, 6),
    max_rank: int = 4,
    seed: int = 0,
    h: float = 1e-5,
    corrupt: bool = False,
) -> float:
    """Max relative error of nll_gradient against central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        shape = Shape3(*(int(rng.integers(2, d + 1)) for d in max_dims))
        rank = int(rng.integers(1, max_rank + 1))
        c = random_scores(rng, shape, rank)
        t = random_triplet(rng, shape)
        analytic = cpdist.nll_gradient(c, t)
        numeric = fd_score_gradient(c, t, h)
        for a, n in ((analytic.subj, numeric.subj),
                     (analytic.pred, numeric.pred),
                     (analytic.obj, numeric.obj)):
            if corrupt:
                a = a + 1e-3
            worst = max(worst, _rel_error(a, n))
    return worst


def fd_param_gradients(
    m: network.ModelParams, x: np.ndarray, t: TripletIndex, h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Numeric gradient of the composite loss nll(forward(m, x), t) per branch parameter."""
    def loss() -> float:
        scores, _ = network.forward(m, x)
        return cpdist.nll_loss(scores, t)

    grads = {}
    for key in network.PARAM_KEYS:
        if key in ("w_sel", "b_sel"):
            continue
        arr = m.params[key]
        g = np.zeros_like(arr)
        for idx in np.ndindex(*arr.shape):
            for sign in (+1.0, -1.0):
                arr[idx] += sign * h
                g[idx] += sign * loss()
                arr[idx] -= sign * h
        grads[key] = g / (2.0 * h)
    return grads


def check_param_gradients(
    instances: int,
    feature_dim: int = 5,
    hidden_dim: int = 6,
    shape: Shape3 = Shape3(4, 3, 5),
    rank: int = 3,
    seed: int = 0,
    h: float = 1e-5,
    corrupt: bool = False,
) -> float:
    """Max relative error of the backpropagated parameter gradients."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in range(instances):
        m = network.init_params(feature_dim, hidden_dim, shape, rank, seed=int(rng.integers(2**31)))
        x = rng.normal(size=feature_dim)
        t = random_triplet(rng, shape)
        scores, cache = network.forward(m, x)
        analytic = network.backward(m, cache, cpdist.nll_gradient(scores, t))
        numeric = fd_param_gradients(m, x, t, h)
        for key, num in numeric.items():
            a = analytic[key] + (1e-3 if corrupt else 0.0)
            worst = max(worst, _rel_error(a, num))
    return worst


def run_gradcheck(
    score_instances: int = 100,
    param_instances: int = 20,
    max_dims: tuple[int, int, int] = (6, 5, 6),
    max_rank: int = 4,
    seed: int = 0,
    corrupt: bool = False,
) -> GradCheckResult:
    return GradCheckResult(
        max_rel_error_scores=check_score_gradients(
            score_instances, max_dims, max_rank, seed=seed, corrupt=corrupt
        ),
        max_rel_error_params=check_param_gradients(
            param_instances, rank=min(max_rank, 3), seed=seed, corrupt=corrupt
        ),
        instances=score_instances + param_instances,
    )
