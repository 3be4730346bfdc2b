"""Dense order-3 tensor arithmetic.

This is the brute-force reference path: everything the compressed
representation computes can be checked against an explicitly
materialized tensor from here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class ShapeError(ValueError):
    """Dimension mismatch between tensors or factor vectors."""


class DegenerateInputError(ValueError):
    """Input outside the operation's domain (e.g. zero-sum normalize)."""


class Shape3(NamedTuple):
    """Sizes of the (subject, predicate, object) axes."""

    n_s: int
    n_p: int
    n_o: int

    def validate(self) -> None:
        if min(self) < 1:
            raise ShapeError(f"all dimensions must be >= 1, got {self}")

    @property
    def size(self) -> int:
        return self.n_s * self.n_p * self.n_o


class TripletIndex(NamedTuple):
    """Zero-based (subject, predicate, object) cell index."""

    i: int
    j: int
    k: int

    def check_within(self, shape: Shape3) -> None:
        if not (0 <= self.i < shape.n_s and 0 <= self.j < shape.n_p and 0 <= self.k < shape.n_o):
            raise IndexError(f"triplet {self} out of range for shape {shape}")


@dataclass(frozen=True)
class DenseTensor:
    """Explicit order-3 array, flattened row-major as (subject, predicate, object)."""

    shape: Shape3
    values: np.ndarray

    def __post_init__(self):
        self.shape.validate()
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size != self.shape.size:
            raise ShapeError(
                f"values length {v.size} does not match shape {self.shape} "
                f"(expected {self.shape.size})"
            )
        object.__setattr__(self, "values", v)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "DenseTensor":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"expected a 3-d array, got ndim={arr.ndim}")
        return cls(Shape3(*arr.shape), arr.ravel())

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def at(self, t: TripletIndex) -> float:
        t.check_within(self.shape)
        return float(self.as_array()[t.i, t.j, t.k])

    def is_probability_tensor(self, tol: float = 1e-9) -> bool:
        return bool(np.all(self.values >= 0.0) and abs(self.values.sum() - 1.0) <= tol)


def dense_from_cp(factors, shape: Shape3) -> DenseTensor:
    """Materialize sum_r phi_s[r] (x) phi_p[r] (x) phi_o[r] as a dense tensor.

    `factors` is a sequence of (vec_s, vec_p, vec_o) triples, one per
    mixture component, with non-negative entries.
    """
    shape.validate()
    if len(factors) < 1:
        raise ShapeError("need at least one rank-1 component")
    acc = np.zeros(shape, dtype=np.float64)
    for vs, vp, vo in factors:
        vs = np.asarray(vs, dtype=np.float64)
        vp = np.asarray(vp, dtype=np.float64)
        vo = np.asarray(vo, dtype=np.float64)
        if vs.shape != (shape.n_s,) or vp.shape != (shape.n_p,) or vo.shape != (shape.n_o,):
            raise ShapeError(
                f"factor lengths {(vs.size, vp.size, vo.size)} do not match shape {shape}"
            )
        if (vs < 0).any() or (vp < 0).any() or (vo < 0).any():
            raise DegenerateInputError("factor vectors must be non-negative")
        acc += np.einsum("i,j,k->ijk", vs, vp, vo)
    return DenseTensor(shape, acc.ravel())


def tensor_sum(t: DenseTensor) -> float:
    return float(t.values.sum())


def normalize(t: DenseTensor) -> DenseTensor:
    """Scale entries to sum to 1, turning a non-negative tensor into a probability tensor."""
    if (t.values < 0).any():
        raise DegenerateInputError("cannot normalize a tensor with negative entries")
    s = tensor_sum(t)
    if s <= 0.0:
        raise DegenerateInputError("cannot normalize a zero-sum tensor")
    return DenseTensor(t.shape, t.values / s)


def top_k_entries(t: DenseTensor, k: int) -> list[tuple[TripletIndex, float]]:
    """The min(k, size) largest entries, descending; ties break by ascending (i,j,k).

    Row-major flat order is exactly lexicographic (i,j,k) order, so a
    stable sort on the flat array gives the required tie-break for free.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.argsort(-t.values, kind="stable")[: min(k, t.values.size)]
    n_p, n_o = t.shape.n_p, t.shape.n_o
    out = []
    for flat in order:
        i, rem = divmod(int(flat), n_p * n_o)
        j, kk = divmod(rem, n_o)
        out.append((TripletIndex(i, j, kk), float(t.values[flat])))
    return out


def elementwise_product(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """Entrywise product; the result is not renormalized."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return DenseTensor(a.shape, a.values * b.values)
