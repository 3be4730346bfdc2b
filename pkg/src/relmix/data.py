"""Synthetic relation scenes: generation, persistence, and batch helpers.

Each scene holds a handful of objects with class-conditioned noisy
features and all ordered pairs between them.  Every pair carries a
ground-truth low-rank triplet distribution built from the latent object
classes; an annotator "selects" pairs with a geometry-biased coin and
draws one annotation from the ground truth for each selected pair.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import cpdist
from .cpdist import CpScores
from .tensor3 import Shape3, TripletIndex

FORMAT_VERSION = 1

# Peak logit of a ground-truth mode and scale of the smooth
# feature-dependent perturbation on top of it.  The peak dominates the
# perturbation by a wide margin, so every intended mode keeps high mass.
_GT_PEAK = 4.0
_GT_PERT = 0.3

# Fixed offset of the selection logit; the geometry proximity term is
# strictly positive, so an unbounded bias strength selects all pairs.
_SEL_OFFSET = 2.0
_PROXIMITY_SCALE = 0.25


def _proximity(distance: float) -> float:
    """Gaussian closeness score in (0, 1]; near 1 for touching pairs."""
    return float(np.exp(-(distance ** 2) / _PROXIMITY_SCALE))


class ParseError(ValueError):
    """Malformed dataset or checkpoint record."""


class DegenerateDataError(ValueError):
    """Dataset lacks the examples a routine needs (e.g. no positives)."""


@dataclass
class SceneObject:
    object_id: int
    latent_class: int
    feature: np.ndarray
    det_confidence: float


@dataclass
class PairSample:
    subject_id: int
    object_id: int
    geometry: np.ndarray
    selected: bool
    annotation: Optional[TripletIndex]
    pair_feature: np.ndarray
    gt: Optional[CpScores] = None

    def __post_init__(self):
        if self.subject_id == self.object_id:
            raise ValueError("pair must join two distinct objects")
        if self.selected != (self.annotation is not None):
            raise ValueError("annotation must be present exactly when selected")


@dataclass
class Scene:
    scene_id: int
    objects: list[SceneObject]
    pairs: list[PairSample]


@dataclass(frozen=True)
class DatasetMeta:
    shape: Shape3
    obj_feature_dim: int
    geom_dim: int = 2

    @property
    def pair_feature_dim(self) -> int:
        return 2 * self.obj_feature_dim + self.geom_dim


@dataclass(frozen=True)
class GenSpec:
    n_obj_classes: int = 6
    n_pred_classes: int = 6
    obj_feature_dim: int = 6
    true_rank: int = 2
    modality_count: int = 2
    selection_bias_strength: float = 4.0
    n_scenes: int = 100
    objects_per_scene: int = 4
    feature_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if min(self.n_obj_classes, self.n_pred_classes, self.obj_feature_dim,
               self.true_rank, self.modality_count, self.n_scenes) < 1:
            raise ValueError("all counts in the generation spec must be >= 1")
        if self.objects_per_scene < 2:
            raise ValueError("need at least two objects per scene to form a pair")
        if self.true_rank < self.modality_count:
            raise ValueError("true_rank must be >= modality_count")
        if self.modality_count > self.n_pred_classes:
            raise ValueError("cannot have more predicate modes than predicate classes")

    @property
    def shape(self) -> Shape3:
        return Shape3(self.n_obj_classes, self.n_pred_classes, self.n_obj_classes)

    @property
    def meta(self) -> DatasetMeta:
        return DatasetMeta(self.shape, self.obj_feature_dim)


class _GroundTruthGenerator:
    """Fixed smooth map from pair features to ground-truth score vectors.

    For an object-class pair (cs, co), component r peaks at subject class
    cs, at the r-th entry of a per-(cs, co) predicate permutation, and at
    the r-th entry of a per-co object-class permutation.  Distinct
    predicate/object peaks across components couple the two variables, so
    the joint has `true_rank` genuinely mixed modes.  A small tanh-squashed
    linear perturbation of the pair feature keeps the map smooth without
    disturbing the modes.
    """

    def __init__(self, spec: GenSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 1])
        n_c, n_p, r = spec.n_obj_classes, spec.n_pred_classes, spec.true_rank
        self.class_emb = rng.normal(size=(n_c, spec.obj_feature_dim))
        self.pred_table = np.empty((n_c, n_c, r), dtype=np.int64)
        for cs in range(n_c):
            for co in range(n_c):
                perm = rng.permutation(n_p)
                self.pred_table[cs, co] = [perm[q % n_p] for q in range(r)]
        self.obj_table = np.empty((n_c, r), dtype=np.int64)
        for co in range(n_c):
            rest = rng.permutation(np.delete(np.arange(n_c), co))
            order = np.concatenate([[co], rest])
            self.obj_table[co] = [order[q % n_c] for q in range(r)]
        d = spec.meta.pair_feature_dim
        shape = spec.shape
        self.pert = {
            a: rng.normal(size=(r * dim, d)) / np.sqrt(d)
            for a, dim in zip("spo", shape)
        }

    def scores_for(self, cs: int, co: int, pair_feature: np.ndarray) -> CpScores:
        spec = self.spec
        r = spec.true_rank
        shape = spec.shape
        base = {
            "s": np.zeros((r, shape.n_s)),
            "p": np.zeros((r, shape.n_p)),
            "o": np.zeros((r, shape.n_o)),
        }
        for q in range(r):
            base["s"][q, cs] = _GT_PEAK
            base["p"][q, self.pred_table[cs, co, q]] = _GT_PEAK
            base["o"][q, self.obj_table[co, q]] = _GT_PEAK
        for a, dim in zip("spo", shape):
            pert = _GT_PERT * np.tanh(self.pert[a] @ pair_feature)
            base[a] = base[a] + pert.reshape(r, dim)
        return CpScores(base["s"], base["p"], base["o"])


def _selection_prob(strength: float, distance: float) -> float:
    logit = strength * _proximity(distance) - _SEL_OFFSET
    logit = float(np.clip(logit, -30.0, 30.0))
    return 1.0 / (1.0 + np.exp(-logit))


def _generate_scene(spec: GenSpec, gen: _GroundTruthGenerator, scene_id: int) -> Scene:
    rng = np.random.default_rng([spec.seed, 2, scene_id])
    n = spec.objects_per_scene
    classes = rng.integers(spec.n_obj_classes, size=n)
    positions = rng.random((n, 2))
    objects = []
    for oid in range(n):
        feature = gen.class_emb[classes[oid]] + spec.feature_noise * rng.normal(size=spec.obj_feature_dim)
        conf = float(rng.beta(5.0, 1.0))
        objects.append(SceneObject(oid, int(classes[oid]), feature, max(conf, 1e-9)))
    pairs = []
    for s_id in range(n):
        for o_id in range(n):
            if s_id == o_id:
                continue
            dist = float(np.linalg.norm(positions[s_id] - positions[o_id]))
            geometry = np.array([dist, _proximity(dist)])
            pair_feature = np.concatenate([objects[s_id].feature, objects[o_id].feature, geometry])
            gt = gen.scores_for(int(classes[s_id]), int(classes[o_id]), pair_feature)
            selected = bool(rng.random() < _selection_prob(spec.selection_bias_strength, dist))
            annotation = cpdist.sample(gt, rng) if selected else None
            pairs.append(PairSample(s_id, o_id, geometry, selected, annotation, pair_feature, gt))
    return Scene(scene_id, objects, pairs)


def gen_synthetic(spec: GenSpec) -> tuple[list[Scene], list[Scene], list[Scene]]:
    """Generate all scenes and split 70/15/15 by scene index."""
    gen = _GroundTruthGenerator(spec)
    scenes = [_generate_scene(spec, gen, sid) for sid in range(spec.n_scenes)]
    n_train = int(round(0.7 * spec.n_scenes))
    n_val = int(round(0.15 * spec.n_scenes))
    n_train = min(n_train, spec.n_scenes)
    n_val = min(n_val, spec.n_scenes - n_train)
    return scenes[:n_train], scenes[n_train:n_train + n_val], scenes[n_train + n_val:]


# ----------------------------------------------------------------------
# Persistence: line-delimited text records, one object/pair per line.

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_vec(v: np.ndarray) -> str:
    return " ".join(_fmt(x) for x in v)


def save_dataset(scenes: list[Scene], meta: DatasetMeta, path: str, with_gt: bool = False) -> None:
    lines = [
        f"HDR {FORMAT_VERSION} n_s={meta.shape.n_s} n_p={meta.shape.n_p} "
        f"n_o={meta.shape.n_o} obj_feature_dim={meta.obj_feature_dim} geom_dim={meta.geom_dim}"
    ]
    for scene in scenes:
        for obj in scene.objects:
            lines.append(
                f"OBJ {scene.scene_id} {obj.object_id} {obj.latent_class} "
                f"{_fmt(obj.det_confidence)} {_fmt_vec(obj.feature)}"
            )
        for pair in scene.pairs:
            anno = f"{pair.annotation.i},{pair.annotation.j},{pair.annotation.k}" if pair.annotation else "-"
            lines.append(
                f"PAIR {scene.scene_id} {pair.subject_id} {pair.object_id} "
                f"{_fmt_vec(pair.geometry)} {int(pair.selected)} {anno}"
            )
            if with_gt and pair.gt is not None:
                flat = np.concatenate([pair.gt.subj.ravel(), pair.gt.pred.ravel(), pair.gt.obj.ravel()])
                lines.append(
                    f"GT {scene.scene_id} {pair.subject_id} {pair.object_id} "
                    f"{pair.gt.rank} {_fmt_vec(flat)}"
                )
    _atomic_write(path, "\n".join(lines) + "\n")


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_fail(lineno: int, fieldname: str, message: str):
    raise ParseError(f"line {lineno}: field '{fieldname}': {message}")


def _take_floats(parts: list[str], start: int, count: int, lineno: int, fieldname: str) -> np.ndarray:
    if len(parts) < start + count:
        _parse_fail(lineno, fieldname, f"expected {count} values, found {len(parts) - start}")
    try:
        return np.array([float(p) for p in parts[start:start + count]])
    except ValueError as exc:
        _parse_fail(lineno, fieldname, str(exc))


def load_dataset(path: str) -> tuple[list[Scene], DatasetMeta]:
    with open(path) as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise ParseError("line 1: field 'HDR': empty file")
    meta = _parse_header(raw[0])
    scenes: dict[int, Scene] = {}
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "OBJ":
            _load_obj(parts, lineno, meta, scenes)
        elif tag == "PAIR":
            _load_pair(parts, lineno, meta, scenes)
        elif tag == "GT":
            _load_gt(parts, lineno, meta, scenes)
        else:
            _parse_fail(lineno, "tag", f"unknown record tag {tag!r}")
    return list(scenes.values()), meta


def _parse_header(line: str) -> DatasetMeta:
    parts = line.split()
    if not parts or parts[0] != "HDR":
        _parse_fail(1, "tag", "file must start with an HDR record")
    try:
        version = int(parts[1])
    except (IndexError, ValueError):
        _parse_fail(1, "version", "missing or non-integer version")
    if version != FORMAT_VERSION:
        _parse_fail(1, "version", f"unsupported dataset version {version}")
    kv = {}
    for item in parts[2:]:
        key, _, value = item.partition("=")
        try:
            kv[key] = int(value)
        except ValueError:
            _parse_fail(1, key, f"non-integer value {value!r}")
    try:
        return DatasetMeta(
            Shape3(kv["n_s"], kv["n_p"], kv["n_o"]), kv["obj_feature_dim"], kv["geom_dim"]
        )
    except KeyError as exc:
        _parse_fail(1, str(exc), "missing header field")


def _scene_for(scenes: dict[int, Scene], scene_id: int) -> Scene:
    if scene_id not in scenes:
        scenes[scene_id] = Scene(scene_id, [], [])
    return scenes[scene_id]


def _load_obj(parts, lineno, meta, scenes):
    try:
        scene_id, object_id, latent = int(parts[1]), int(parts[2]), int(parts[3])
    except (IndexError, ValueError):
        _parse_fail(lineno, "ids", "OBJ needs integer scene_id, object_id, class")
    conf = float(_take_floats(parts, 4, 1, lineno, "det_confidence")[0])
    feature = _take_floats(parts, 5, meta.obj_feature_dim, lineno, "feature")
    if len(parts) != 5 + meta.obj_feature_dim:
        _parse_fail(lineno, "feature", "trailing values after feature vector")
    _scene_for(scenes, scene_id).objects.append(SceneObject(object_id, latent, feature, conf))


def _find_object(scene: Scene, object_id: int, lineno: int, fieldname: str) -> SceneObject:
    for obj in scene.objects:
        if obj.object_id == object_id:
            return obj
    _parse_fail(lineno, fieldname, f"references unknown object {object_id}")


def _load_pair(parts, lineno, meta, scenes):
    try:
        scene_id, sub_id, obj_id = int(parts[1]), int(parts[2]), int(parts[3])
    except (IndexError, ValueError):
        _parse_fail(lineno, "ids", "PAIR needs integer scene_id, subject_id, object_id")
    geometry = _take_floats(parts, 4, meta.geom_dim, lineno, "geometry")
    base = 4 + meta.geom_dim
    if len(parts) != base + 2:
        _parse_fail(lineno, "selected/annotation", "PAIR needs a selected flag and an annotation")
    if parts[base] not in ("0", "1"):
        _parse_fail(lineno, "selected", f"flag must be 0 or 1, got {parts[base]!r}")
    selected = parts[base] == "1"
    anno_text = parts[base + 1]
    annotation = None
    if anno_text != "-":
        pieces = anno_text.split(",")
        if len(pieces) != 3:
            _parse_fail(lineno, "annotation", f"expected i,j,k or '-', got {anno_text!r}")
        try:
            annotation = TripletIndex(*(int(p) for p in pieces))
        except ValueError:
            _parse_fail(lineno, "annotation", f"non-integer index in {anno_text!r}")
        annotation.check_within(meta.shape)
    scene = _scene_for(scenes, scene_id)
    subj = _find_object(scene, sub_id, lineno, "subject_id")
    obj = _find_object(scene, obj_id, lineno, "object_id")
    pair_feature = np.concatenate([subj.feature, obj.feature, geometry])
    try:
        scene.pairs.append(PairSample(sub_id, obj_id, geometry, selected, annotation, pair_feature))
    except ValueError as exc:
        _parse_fail(lineno, "pair", str(exc))


def _load_gt(parts, lineno, meta, scenes):
    try:
        scene_id, sub_id, obj_id, rank = (int(parts[i]) for i in (1, 2, 3, 4))
    except (IndexError, ValueError):
        _parse_fail(lineno, "ids", "GT needs integer scene_id, subject_id, object_id, rank")
    n_s, n_p, n_o = meta.shape
    flat = _take_floats(parts, 5, rank * (n_s + n_p + n_o), lineno, "scores")
    subj = flat[: rank * n_s].reshape(rank, n_s)
    pred = flat[rank * n_s: rank * (n_s + n_p)].reshape(rank, n_p)
    obj = flat[rank * (n_s + n_p):].reshape(rank, n_o)
    scene = scenes.get(scene_id)
    pair = None
    if scene is not None:
        for p in scene.pairs:
            if p.subject_id == sub_id and p.object_id == obj_id:
                pair = p
                break
    if pair is None:
        _parse_fail(lineno, "pair", f"GT record for unknown pair ({sub_id}, {obj_id})")
    pair.gt = CpScores(subj, pred, obj)


# ----------------------------------------------------------------------
# Batch helpers.

def positive_samples(scenes: list[Scene]) -> list[tuple[np.ndarray, TripletIndex]]:
    """All (pair_feature, annotation) examples from selected pairs."""
    return [
        (pair.pair_feature, pair.annotation)
        for scene in scenes
        for pair in scene.pairs
        if pair.selected
    ]


def balanced_selection_batches(
    scenes: list[Scene], seed: int, epochs: int = 1
) -> Iterator[tuple[np.ndarray, int]]:
    """Selection-head training stream with equal positives and negatives.

    Each epoch yields every positive pair once plus an equally sized,
    freshly drawn set of negatives (without replacement when enough
    negatives exist, with replacement otherwise), in shuffled order.
    """
    positives = [p.pair_feature for s in scenes for p in s.pairs if p.selected]
    negatives = [p.pair_feature for s in scenes for p in s.pairs if not p.selected]
    if not positives or not negatives:
        raise DegenerateDataError("selection training needs both selected and unselected pairs")
    rng = np.random.default_rng([seed, 977])
    for _ in range(epochs):
        replace = len(negatives) < len(positives)
        neg_idx = rng.choice(len(negatives), size=len(positives), replace=replace)
        batch = [(f, 1) for f in positives] + [(negatives[i], 0) for i in neg_idx]
        order = rng.permutation(len(batch))
        for idx in order:
            yield batch[idx]
