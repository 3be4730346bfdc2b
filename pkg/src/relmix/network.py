"""Feedforward parameterization of the triplet scores plus the selection head.

Three independent one-hidden-layer branches map a pair feature vector
to the R score vectors for subject, predicate and object.  A logistic
head over the same feature models the probability that an annotator
selects the pair at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cpdist import CpGrad, CpScores
from .tensor3 import Shape3, ShapeError

BRANCHES = ("s", "p", "o")
PARAM_KEYS = tuple(
    f"{kind}_{a}" for a in BRANCHES for kind in ("W1", "b1", "W2", "b2")
) + ("w_sel", "b_sel")


@dataclass
class ModelParams:
    feature_dim: int
    hidden_dim: int
    shape: Shape3
    rank: int
    params: dict[str, np.ndarray]

    def __post_init__(self):
        self.shape.validate()
        dims = dict(zip(BRANCHES, self.shape))
        expected = {}
        for a in BRANCHES:
            expected[f"W1_{a}"] = (self.hidden_dim, self.feature_dim)
            expected[f"b1_{a}"] = (self.hidden_dim,)
            expected[f"W2_{a}"] = (self.rank * dims[a], self.hidden_dim)
            expected[f"b2_{a}"] = (self.rank * dims[a],)
        expected["w_sel"] = (self.feature_dim,)
        expected["b_sel"] = ()
        for key, shp in expected.items():
            arr = self.params.get(key)
            if arr is None or arr.shape != shp:
                raise ShapeError(f"parameter {key}: expected shape {shp}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {key} contains non-finite entries")

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.feature_dim,
            self.hidden_dim,
            self.shape,
            self.rank,
            {k: v.copy() for k, v in self.params.items()},
        )


@dataclass(frozen=True)
class ForwardCache:
    """Intermediates from forward() needed to chain gradients back."""

    x: np.ndarray
    pre: dict[str, np.ndarray]  # branch -> W1 x + b1
    hid: dict[str, np.ndarray]  # branch -> relu(pre)


def init_params(feature_dim: int, hidden_dim: int, shape: Shape3, rank: int, seed: int) -> ModelParams:
    """Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] weights, zero biases."""
    if min(feature_dim, hidden_dim, rank) < 1:
        raise ValueError("feature_dim, hidden_dim and rank must all be >= 1")
    shape.validate()
    rng = np.random.default_rng(seed)
    dims = dict(zip(BRANCHES, shape))
    params: dict[str, np.ndarray] = {}
    for a in BRANCHES:
        lim1 = 1.0 / np.sqrt(feature_dim)
        lim2 = 1.0 / np.sqrt(hidden_dim)
        params[f"W1_{a}"] = rng.uniform(-lim1, lim1, size=(hidden_dim, feature_dim))
        params[f"b1_{a}"] = np.zeros(hidden_dim)
        params[f"W2_{a}"] = rng.uniform(-lim2, lim2, size=(rank * dims[a], hidden_dim))
        params[f"b2_{a}"] = np.zeros(rank * dims[a])
    params["w_sel"] = rng.uniform(-1.0 / np.sqrt(feature_dim), 1.0 / np.sqrt(feature_dim), size=feature_dim)
    params["b_sel"] = np.zeros(())
    return ModelParams(feature_dim, hidden_dim, shape, rank, params)


def forward(m: ModelParams, x: np.ndarray) -> tuple[CpScores, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.feature_dim,):
        raise ShapeError(f"feature has shape {x.shape}, expected ({m.feature_dim},)")
    pre, hid, out = {}, {}, {}
    dims = dict(zip(BRANCHES, m.shape))
    for a in BRANCHES:
        pre[a] = m.params[f"W1_{a}"] @ x + m.params[f"b1_{a}"]
        hid[a] = np.maximum(pre[a], 0.0)
        flat = m.params[f"W2_{a}"] @ hid[a] + m.params[f"b2_{a}"]
        out[a] = flat.reshape(m.rank, dims[a])
    scores = CpScores(out["s"], out["p"], out["o"])
    return scores, ForwardCache(x, pre, hid)


def backward(m: ModelParams, cache: ForwardCache, g: CpGrad) -> dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every branch parameter given dL/dscores."""
    if g.shape != m.shape or g.rank != m.rank:
        raise ShapeError("gradient layout does not match model output layout")
    if cache.x.shape != (m.feature_dim,):
        raise ShapeError("cache was not produced by this model")
    grads: dict[str, np.ndarray] = {}
    by_branch = {"s": g.subj, "p": g.pred, "o": g.obj}
    for a in BRANCHES:
        gflat = by_branch[a].ravel()
        grads[f"W2_{a}"] = np.outer(gflat, cache.hid[a])
        grads[f"b2_{a}"] = gflat.copy()
        ghid = m.params[f"W2_{a}"].T @ gflat
        gpre = ghid * (cache.pre[a] > 0.0)
        grads[f"W1_{a}"] = np.outer(gpre, cache.x)
        grads[f"b1_{a}"] = gpre
    return grads


def sel_forward(m: ModelParams, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.feature_dim,):
        raise ShapeError(f"feature has shape {x.shape}, expected ({m.feature_dim},)")
    z = float(m.params["w_sel"] @ x + m.params["b_sel"])
    # Clamp keeps the output strictly inside (0, 1) for any finite input.
    z = np.clip(z, -500.0, 500.0)
    p = 1.0 / (1.0 + np.exp(-z))
    return float(np.clip(p, 1e-300, 1.0 - 1e-16))


def sel_backward(m: ModelParams, x: np.ndarray, label: int) -> dict[str, np.ndarray]:
    """Binary cross-entropy gradient for the selection head: (p - y) x, (p - y)."""
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    p = sel_forward(m, x)
    d = p - label
    return {"w_sel": d * np.asarray(x, dtype=np.float64), "b_sel": np.asarray(d)}
