"""Piecewise training and checkpointing.

The triplet branches are fit first, by SGD on the negative
log-likelihood of annotated pairs with global-norm gradient clipping.
They are then frozen and the selection head is fit on balanced
positive/negative batches.  The triplet frequency prior is counted from
the same training annotations.
"""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import cpdist, network
from .data import DegenerateDataError, Scene, DatasetMeta, balanced_selection_batches, positive_samples
from .network import ModelParams
from .prior import PriorTensor, build_prior
from .tensor3 import Shape3, TripletIndex

CHECKPOINT_MAGIC = "RELMIX-MODEL"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, or wrong-version checkpoint file."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    clip_norm: float = 20.0
    epochs: int = 7
    batch_size: int = 32
    rank: int = 5
    hidden_dim: int = 64
    seed: int = 0
    sel_learning_rate: float = 0.5
    sel_epochs: int = 7

    def __post_init__(self):
        if self.learning_rate < 0 or self.sel_learning_rate < 0:
            raise ValueError("learning rates must be >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.epochs < 0 or self.sel_epochs < 0 or self.batch_size < 1 or self.rank < 1:
            raise ValueError("invalid training configuration")


@dataclass
class TrainedModel:
    params: ModelParams
    prior: PriorTensor
    config: TrainConfig
    loss_trace: list[float] = field(default_factory=list)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients by max_norm/g when the global L2 norm g exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def train_triplet(
    config: TrainConfig,
    scenes: list[Scene],
    meta: DatasetMeta,
    progress=None,
) -> TrainedModel:
    """Fit the triplet branches on annotated pairs; build the prior alongside."""
    samples = positive_samples(scenes)
    if not samples:
        raise DegenerateDataError("training split has no annotated pairs")
    params = network.init_params(
        meta.pair_feature_dim, config.hidden_dim, meta.shape, config.rank, config.seed
    )
    rng = np.random.default_rng([config.seed, 11])
    trace: list[float] = []
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = rng.permutation(len(samples))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo: lo + config.batch_size]
            acc: dict[str, np.ndarray] | None = None
            for idx in batch:
                feature, target = samples[idx]
                scores, cache = network.forward(params, feature)
                losses.append(cpdist.nll_loss(scores, target))
                g = cpdist.nll_gradient(scores, target)
                grads = network.backward(params, cache, g)
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] += grads[k]
            for k in acc:
                acc[k] /= len(batch)
            acc = clip_gradients(acc, config.clip_norm)
            for k, g in acc.items():
                params.params[k] -= config.learning_rate * g
        mean_nll = float(np.mean(losses))
        trace.append(mean_nll)
        if progress is not None:
            progress(f"phase=triplet epoch={epoch + 1} nll={mean_nll:.6f} "
                     f"wall={time.perf_counter() - start:.3f}")
    annotations = [t for _, t in samples]
    prior = build_prior(annotations, meta.shape)
    return TrainedModel(params, prior, config, trace)


def train_selection(
    config: TrainConfig,
    scenes: list[Scene],
    frozen: TrainedModel,
    progress=None,
) -> TrainedModel:
    """Fit only the selection head; every triplet-branch parameter stays bit-identical."""
    params = frozen.params.copy()
    if config.sel_epochs > 0:
        stream = balanced_selection_batches(scenes, seed=config.seed, epochs=config.sel_epochs)
        losses: list[float] = []
        epoch_size = 2 * sum(1 for s in scenes for p in s.pairs if p.selected)
        seen = 0
        epoch = 0
        start = time.perf_counter()
        for feature, label in stream:
            p = network.sel_forward(params, feature)
            losses.append(-(np.log(p) if label else np.log1p(-p)))
            grads = clip_gradients(network.sel_backward(params, feature, label), config.clip_norm)
            params.params["w_sel"] -= config.sel_learning_rate * grads["w_sel"]
            params.params["b_sel"] -= config.sel_learning_rate * grads["b_sel"]
            seen += 1
            if seen == epoch_size:
                epoch += 1
                if progress is not None:
                    progress(f"phase=selection epoch={epoch} bce={float(np.mean(losses)):.6f} "
                             f"wall={time.perf_counter() - start:.3f}")
                losses, seen = [], 0
                start = time.perf_counter()
    return TrainedModel(params, frozen.prior, config, list(frozen.loss_trace))


# ----------------------------------------------------------------------
# Checkpoint persistence: versioned text, flat decimal arrays.

def _fmt_vec(v: np.ndarray) -> str:
    return " ".join(format(float(x), ".17g") for x in np.asarray(v).ravel())


def save_model(model: TrainedModel, path: str) -> None:
    cfg = model.config
    p = model.params
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    lines.append(
        "CONFIG "
        f"learning_rate={cfg.learning_rate!r} clip_norm={cfg.clip_norm!r} "
        f"epochs={cfg.epochs} batch_size={cfg.batch_size} rank={cfg.rank} "
        f"hidden_dim={cfg.hidden_dim} seed={cfg.seed} "
        f"sel_learning_rate={cfg.sel_learning_rate!r} sel_epochs={cfg.sel_epochs}"
    )
    lines.append(
        f"DIMS feature_dim={p.feature_dim} hidden_dim={p.hidden_dim} "
        f"n_s={p.shape.n_s} n_p={p.shape.n_p} n_o={p.shape.n_o} rank={p.rank}"
    )
    for key in network.PARAM_KEYS:
        arr = p.params[key]
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"PARAM {key} {len(arr.shape)} {dims}".rstrip())
        lines.append(_fmt_vec(arr))
    lines.append(f"TRACE {_fmt_vec(np.array(model.loss_trace))}".rstrip())
    lines.append(f"PRIOR {len(model.prior.counts)}")
    for t in sorted(model.prior.counts):
        lines.append(f"{t.i} {t.j} {t.k} {model.prior.counts[t]}")
    lines.append("END")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_kv(line: str, tag: str) -> dict[str, str]:
    parts = line.split()
    if not parts or parts[0] != tag:
        raise CheckpointError(f"expected {tag} record, got: {line[:40]!r}")
    out = {}
    for item in parts[1:]:
        key, _, value = item.partition("=")
        out[key] = value
    return out


def load_model(path: str) -> TrainedModel:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CheckpointError(str(exc))
    if not lines:
        raise CheckpointError("empty checkpoint file")
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint")
    if int(magic[1]) != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {magic[1]}")
    if not lines or lines[-1].strip() != "END":
        raise CheckpointError("truncated checkpoint: missing END marker")
    try:
        cfg_kv = _parse_kv(lines[1], "CONFIG")
        config = TrainConfig(
            learning_rate=float(cfg_kv["learning_rate"]),
            clip_norm=float(cfg_kv["clip_norm"]),
            epochs=int(cfg_kv["epochs"]),
            batch_size=int(cfg_kv["batch_size"]),
            rank=int(cfg_kv["rank"]),
            hidden_dim=int(cfg_kv["hidden_dim"]),
            seed=int(cfg_kv["seed"]),
            sel_learning_rate=float(cfg_kv["sel_learning_rate"]),
            sel_epochs=int(cfg_kv["sel_epochs"]),
        )
        dims = {k: int(v) for k, v in _parse_kv(lines[2], "DIMS").items()}
        shape = Shape3(dims["n_s"], dims["n_p"], dims["n_o"])
        cursor = 3
        params: dict[str, np.ndarray] = {}
        for key in network.PARAM_KEYS:
            head = lines[cursor].split()
            if head[0] != "PARAM" or head[1] != key:
                raise CheckpointError(f"expected PARAM {key}, got: {lines[cursor][:40]!r}")
            ndim = int(head[2])
            arr_shape = tuple(int(x) for x in head[3: 3 + ndim])
            flat = np.array([float(x) for x in lines[cursor + 1].split()]) if ndim else \
                np.array(float(lines[cursor + 1]))
            params[key] = flat.reshape(arr_shape)
            cursor += 2
        trace_parts = lines[cursor].split()
        if trace_parts[0] != "TRACE":
            raise CheckpointError("expected TRACE record")
        trace = [float(x) for x in trace_parts[1:]]
        cursor += 1
        prior_head = lines[cursor].split()
        if prior_head[0] != "PRIOR":
            raise CheckpointError("expected PRIOR record")
        n_counts = int(prior_head[1])
        counts: dict[TripletIndex, int] = {}
        for line in lines[cursor + 1: cursor + 1 + n_counts]:
            i, j, k, n = (int(x) for x in line.split())
            counts[TripletIndex(i, j, k)] = n
        if lines[cursor + 1 + n_counts].strip() != "END":
            raise CheckpointError("truncated checkpoint: prior counts incomplete")
    except (IndexError, KeyError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc}")
    model_params = ModelParams(dims["feature_dim"], dims["hidden_dim"], shape, dims["rank"], params)
    return TrainedModel(model_params, PriorTensor(shape, counts), config, trace)
