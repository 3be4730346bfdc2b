"""Command-line harness: gen-data, train, eval, gradcheck, inspect."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import cpdist, evaluation, network
from .data import GenSpec, gen_synthetic, load_dataset, save_dataset, _atomic_write
from .gradcheck import run_gradcheck
from .training import TrainConfig, load_model, save_model, train_selection, train_triplet

SPLITS = ("train", "val", "test")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="master random seed")
    parser.add_argument("--config", type=str, default=None,
                        help="key=value file supplying defaults for any flag")
    parser.add_argument("--out-dir", type=str, default=".", help="output directory")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relmix")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic relation dataset")
    _add_common(p)
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--objects", type=int, default=4, help="objects per scene")
    p.add_argument("--obj-classes", type=int, default=6)
    p.add_argument("--pred-classes", type=int, default=6)
    p.add_argument("--feature-dim", type=int, default=6)
    p.add_argument("--true-rank", type=int, default=2)
    p.add_argument("--modality-count", type=int, default=2)
    p.add_argument("--selection-bias", type=float, default=4.0)
    p.add_argument("--feature-noise", type=float, default=0.3)
    p.add_argument("--with-gt", action="store_true",
                   help="store ground-truth distributions in the files")

    p = sub.add_parser("train", help="train the triplet branches and the selection head")
    _add_common(p)
    p.add_argument("--data", type=str, required=True, help="directory holding train/val/test files")
    p.add_argument("--model", type=str, default=None, help="checkpoint path (default out-dir/model.txt)")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--clip-norm", type=float, default=20.0)
    p.add_argument("--epochs", type=int, default=7)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--sel-lr", type=float, default=0.5)
    p.add_argument("--sel-epochs", type=int, default=7)

    p = sub.add_parser("eval", help="evaluate a checkpoint: recall@N for k=1 and free-k")
    _add_common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--n", type=int, nargs="+", default=[50, 100])
    p.add_argument("--k-grid", type=int, nargs="+", default=None,
                   help="default: 1 2 3 5 10 and the predicate count")
    p.add_argument("--with-kl", action="store_true",
                   help="report mean KL to stored ground truth (needs --with-gt data)")
    p.add_argument("--no-selection", action="store_true",
                   help="score with the selection factor fixed to 1")
    p.add_argument("--report", type=str, default=None, help="also write the report to this file")

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    _add_common(p)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--rank", type=int, default=4, help="maximum rank of random instances")
    p.add_argument("--dims", type=int, nargs=3, default=[6, 5, 6], metavar=("NS", "NP", "NO"))
    p.add_argument("--threshold", type=float, default=1e-5)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("inspect", help="dump model structure and top predictions for a scene")
    _add_common(p)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", type=str, default="test", choices=SPLITS)
    p.add_argument("--scene-id", type=int, default=None, help="default: first scene of the split")
    p.add_argument("--k", type=int, default=3)
    return parser


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv) -> None:
    """Fill flags from a key=value config file; command-line values win."""
    if not getattr(args, "config", None):
        return
    given = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    entries = {}
    with open(args.config) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"config line without '=': {line!r}")
            entries[key.strip().replace("-", "_")] = value.strip()
    sub_actions = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    actions = sub_actions[0].choices[args.command]._actions if sub_actions else []
    for action in actions:
        dest = action.dest
        if dest not in entries or given.intersection(action.option_strings):
            continue
        value = entries[dest]
        if isinstance(action, argparse._StoreTrueAction):
            setattr(args, dest, value.lower() in ("1", "true", "yes"))
        elif action.nargs in ("+", "*") or isinstance(action.nargs, int):
            setattr(args, dest, [(action.type or str)(v) for v in value.split()])
        else:
            setattr(args, dest, (action.type or str)(value))


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _load_split(data_dir: str, split: str):
    return load_dataset(os.path.join(data_dir, f"{split}.txt"))


def cmd_gen_data(args) -> int:
    spec = GenSpec(
        n_obj_classes=args.obj_classes,
        n_pred_classes=args.pred_classes,
        obj_feature_dim=args.feature_dim,
        true_rank=args.true_rank,
        modality_count=args.modality_count,
        selection_bias_strength=args.selection_bias,
        n_scenes=args.scenes,
        objects_per_scene=args.objects,
        feature_noise=args.feature_noise,
        seed=args.seed,
    )
    splits = gen_synthetic(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    for name, scenes in zip(SPLITS, splits):
        path = os.path.join(args.out_dir, f"{name}.txt")
        save_dataset(scenes, spec.meta, path, with_gt=args.with_gt)
        n_obj = sum(len(s.objects) for s in scenes)
        n_pair = sum(len(s.pairs) for s in scenes)
        _say(args, f"split={name} scenes={len(scenes)} obj_records={n_obj} pair_records={n_pair}")
    return 0


def cmd_train(args) -> int:
    config = TrainConfig(
        learning_rate=args.lr,
        clip_norm=args.clip_norm,
        epochs=args.epochs,
        batch_size=args.batch_size,
        rank=args.rank,
        hidden_dim=args.hidden_dim,
        seed=args.seed,
        sel_learning_rate=args.sel_lr,
        sel_epochs=args.sel_epochs,
    )
    scenes, meta = _load_split(args.data, "train")
    progress = None if args.quiet else print
    model = train_triplet(config, scenes, meta, progress=progress)
    model = train_selection(config, scenes, model, progress=progress)
    model_path = args.model or os.path.join(args.out_dir, "model.txt")
    os.makedirs(os.path.dirname(os.path.abspath(model_path)), exist_ok=True)
    save_model(model, model_path)
    _say(args, f"checkpoint={model_path}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    val_scenes, _ = _load_split(args.data, "val")
    test_scenes, _ = _load_split(args.data, "test")
    k_grid = args.k_grid or [1, 2, 3, 5, 10, model.params.shape.n_p]
    report = evaluation.evaluate(
        model, val_scenes, test_scenes,
        n_values=args.n, k_grid=k_grid,
        include_selection=not args.no_selection,
        with_kl=args.with_kl,
    )
    text = report.to_text()
    print(text)
    if args.report:
        _atomic_write(args.report, text + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    result = run_gradcheck(
        score_instances=args.instances,
        max_dims=tuple(args.dims),
        max_rank=args.rank,
        seed=args.seed,
        corrupt=args.corrupt,
    )
    ok = result.passed(score_tol=args.threshold, param_tol=args.threshold)
    print(f"instances={result.instances}")
    print(f"max_rel_error_scores={result.max_rel_error_scores:.3e}")
    print(f"max_rel_error_params={result.max_rel_error_params:.3e}")
    print(f"status={'PASS' if ok else 'FAIL'} threshold={args.threshold:g}")
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    model = load_model(args.model)
    scenes, _ = _load_split(args.data, args.split)
    if args.scene_id is None:
        scene = scenes[0]
    else:
        matches = [s for s in scenes if s.scene_id == args.scene_id]
        if not matches:
            raise ValueError(f"scene {args.scene_id} not found in split {args.split!r}")
        scene = matches[0]
    shape = model.params.shape
    print(f"shape=({shape.n_s},{shape.n_p},{shape.n_o}) rank={model.params.rank}")
    first = scene.pairs[0]
    scores, _ = network.forward(model.params, first.pair_feature)
    weights = " ".join(f"{w:.6f}" for w in cpdist.mixture_weights(scores))
    print(f"scene={scene.scene_id} pair=({first.subject_id},{first.object_id}) mixture_weights={weights}")
    all_preds = evaluation.score_pairs(model, scene, args.k)
    for pair in scene.pairs:
        preds = [
            p for p in all_preds
            if p.subject_id == pair.subject_id and p.object_id == pair.object_id
        ]
        listing = " ".join(
            f"({p.triplet.i},{p.triplet.j},{p.triplet.k}):{p.score:.4f}" for p in preds
        )
        print(f"pair=({pair.subject_id},{pair.object_id}) top{args.k}={listing}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    args = parser.parse_args(argv)
    try:
        _apply_config(parser, args, argv)
        return COMMANDS[args.command](args)
    except Exception as exc:  # surface a clean one-line error, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
