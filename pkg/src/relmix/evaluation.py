"""Ranking and metrics: fused triplet scoring, recall@N, free-k, KL diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import cpdist, network
from .data import Scene
from .prior import dense_log_prior
from .tensor3 import DenseTensor, ShapeError, TripletIndex, top_k_entries
from .training import TrainedModel


@dataclass(frozen=True)
class Prediction:
    scene_id: int
    subject_id: int
    object_id: int
    triplet: TripletIndex
    score: float  # log-domain full posterior


@dataclass
class EvalReport:
    """Recall table plus the cross-validated k and optional KL diagnostic."""

    k_star: int
    recall_k1: dict[int, float] = field(default_factory=dict)
    recall_free: dict[int, float] = field(default_factory=dict)
    mean_kl: Optional[float] = None
    n_scenes: int = 0
    n_annotations: int = 0

    def to_text(self) -> str:
        lines = [f"k_star={self.k_star}"]
        for n in sorted(self.recall_k1):
            lines.append(f"recall_at_{n}_k1={self.recall_k1[n]:.6f}")
        for n in sorted(self.recall_free):
            lines.append(f"recall_at_{n}_free_k={self.recall_free[n]:.6f}")
        if self.mean_kl is not None:
            lines.append(f"mean_kl={self.mean_kl:.6f}")
        lines.append(f"n_scenes={self.n_scenes}")
        lines.append(f"n_annotations={self.n_annotations}")
        return "\n".join(lines)


def fused_log_tensor(model: TrainedModel, pair_feature: np.ndarray) -> np.ndarray:
    """Dense log of (conditional distribution * frequency prior) for one pair."""
    scores, _ = network.forward(model.params, pair_feature)
    if scores.shape != model.prior.shape:
        raise ShapeError("model output shape does not match prior shape")
    return cpdist.dense_log_prob(scores) + dense_log_prior(model.prior)


def score_pairs(
    model: TrainedModel, scene: Scene, k: int, include_selection: bool = True
) -> list[Prediction]:
    """Top-k fused triplets per ordered pair, merged and globally sorted.

    Each prediction's score is the log full posterior: detector pair
    probability times the fused triplet score times the selection
    probability.  Ties break by pair ids then triplet index.
    """
    conf = {obj.object_id: obj.det_confidence for obj in scene.objects}
    preds: list[Prediction] = []
    for pair in scene.pairs:
        fused = fused_log_tensor(model, pair.pair_feature)
        log_pair = float(np.log(conf[pair.subject_id]) + np.log(conf[pair.object_id]))
        log_sel = float(np.log(network.sel_forward(model.params, pair.pair_feature))) \
            if include_selection else 0.0
        for triplet, value in top_k_entries(DenseTensor.from_array(fused), k):
            preds.append(Prediction(
                scene.scene_id, pair.subject_id, pair.object_id,
                triplet, log_pair + value + log_sel,
            ))
    preds.sort(key=lambda p: (-p.score, p.subject_id, p.object_id, p.triplet))
    return preds


def scene_annotations(scene: Scene) -> list[tuple[int, int, TripletIndex]]:
    return [
        (pair.subject_id, pair.object_id, pair.annotation)
        for pair in scene.pairs
        if pair.annotation is not None
    ]


def recall_at_n(
    predictions: list[list[Prediction]],
    ground_truth: list[list[tuple[int, int, TripletIndex]]],
    n: int,
) -> float:
    """Mean over scenes of the fraction of annotations found in the top-n predictions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    fractions = []
    for preds, gts in zip(predictions, ground_truth):
        if not gts:
            continue
        top = {(p.subject_id, p.object_id, p.triplet) for p in preds[:n]}
        hits = sum(1 for g in gts if g in top)
        fractions.append(hits / len(gts))
    return float(np.mean(fractions)) if fractions else 0.0


def _recall_for_k(model, scenes, n, k, include_selection=True) -> float:
    preds = [score_pairs(model, s, k, include_selection) for s in scenes]
    gts = [scene_annotations(s) for s in scenes]
    return recall_at_n(preds, gts, n)


def select_free_k(model: TrainedModel, val_scenes: list[Scene], n: int, k_grid) -> int:
    """The k maximizing validation recall@n; ties go to the smallest k."""
    if not k_grid or not val_scenes:
        raise ValueError("free-k selection needs a non-empty grid and validation set")
    best_k, best_recall = None, -1.0
    for k in sorted(set(int(k) for k in k_grid)):
        r = _recall_for_k(model, val_scenes, n, k)
        if r > best_recall:
            best_k, best_recall = k, r
    return best_k


def kl_to_ground_truth(model: TrainedModel, pair) -> float:
    """KL(ground-truth distribution || model conditional), dense, in nats."""
    if pair.gt is None:
        raise ValueError("pair carries no stored ground-truth distribution")
    scores, _ = network.forward(model.params, pair.pair_feature)
    log_q = cpdist.dense_log_prob(scores)
    log_p = cpdist.dense_log_prob(pair.gt)
    p = np.exp(log_p)
    return float(np.sum(p * (log_p - log_q)))


def mean_kl_to_ground_truth(model: TrainedModel, scenes: list[Scene]) -> float:
    values = [
        kl_to_ground_truth(model, pair)
        for scene in scenes
        for pair in scene.pairs
        if pair.gt is not None
    ]
    if not values:
        raise ValueError("no pair in these scenes stores a ground-truth distribution")
    return float(np.mean(values))


def evaluate(
    model: TrainedModel,
    val_scenes: list[Scene],
    test_scenes: list[Scene],
    n_values=(50, 100),
    k_grid=(1, 2, 3, 5, 10),
    include_selection: bool = True,
    with_kl: bool = False,
) -> EvalReport:
    """Full protocol: pick k* on validation, report test recall for k=1 and k*."""
    n_values = sorted(set(int(n) for n in n_values))
    k_star = select_free_k(model, val_scenes, n_values[0], k_grid)
    report = EvalReport(k_star=k_star)
    for n in n_values:
        report.recall_k1[n] = _recall_for_k(model, test_scenes, n, 1, include_selection)
        report.recall_free[n] = _recall_for_k(model, test_scenes, n, k_star, include_selection)
    report.n_scenes = len(test_scenes)
    report.n_annotations = sum(len(scene_annotations(s)) for s in test_scenes)
    if with_kl:
        report.mean_kl = mean_kl_to_ground_truth(model, test_scenes)
    return report
