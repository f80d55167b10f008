"""Command-line entry point: synth, train, eval, gradcheck, heatmap, ablate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
from pathlib import Path

from .config import TrainConfig

log = logging.getLogger("multiface")

_DEFAULTS = TrainConfig()

# flag name -> (config field, type, help); defaults come from TrainConfig
TRAIN_FLAGS = [
    ("--epochs", "epochs", int, "training epochs"),
    ("--batch-images", "batch_images", int, "images per optimisation step"),
    ("--lr", "lr", float, "Adam learning rate"),
    ("--group-size", "group_size", int, "slots per similarity group (side of the similarity matrix)"),
    ("--channels", "channels", int, "channels produced from the similarity matrix by the 1x1 expansion"),
    ("--d-model", "d_model", int, "encoder width"),
    ("--heads", "heads", int, "attention heads"),
    ("--d-ff", "d_ff", int, "encoder feed-forward width"),
    ("--global-hidden", "global_hidden", int, "hidden units of the image-level head"),
    ("--clip-norm", "clip_norm", float, "global gradient-norm clip"),
    ("--lambda-local", "lambda_local", float, "weight of the face-level BCE term"),
    ("--lambda-pull", "lambda_pull", float, "weight of the pull (prototype attraction) term"),
    ("--lambda-push", "lambda_push", float, "weight of the push (prototype repulsion) term"),
    ("--seed", "seed", int, "RNG seed for init, shuffling and the validation split"),
    ("--val-fraction", "val_fraction", float, "held-out fraction when --val-data is not given"),
]
CHOICE_FLAGS = [
    ("--metric-input", "metric_input", ("backbone", "encoder"), "features the pull/push losses act on"),
    ("--global-input", "global_input", ("backbone", "encoder"), "features pooled by the image-level branch"),
    ("--pool", "pool", ("max", "mean"), "per-image pooling in the image-level branch"),
    ("--token-order", "token_order", ("sorted", "slot"),
     "similarity rows sorted before projection, or kept in slot order"),
]
SWITCHES = [
    ("--no-sm", "no_sm", "ablation: drop the similarity matrix, tokens come from raw features"),
    ("--no-global", "no_global", "ablation: drop the image-level loss term"),
    ("--no-pull", "no_pull", "ablation: drop the pull loss"),
    ("--no-push", "no_push", "ablation: drop the push loss"),
]


class UsageError(Exception):
    pass


def _add_model_flags(p):
    for flag, field, typ, text in TRAIN_FLAGS:
        p.add_argument(flag, type=typ, default=None, metavar=typ.__name__.upper(),
                       help=f"{text} (default {getattr(_DEFAULTS, field)})")
    for flag, field, choices, text in CHOICE_FLAGS:
        p.add_argument(flag, choices=choices, default=None,
                       help=f"{text} (default {getattr(_DEFAULTS, field)})")
    for flag, field, text in SWITCHES:
        p.add_argument(flag, action="store_true", default=None, help=f"{text} (default off)")
    p.add_argument("--config", type=Path, default=None,
                   help="key=value file with TrainConfig fields; explicit flags override it (default none)")


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in fields:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        value = value.strip("\"'")
        kind = type(getattr(_DEFAULTS, key))
        try:
            if kind is bool:
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                out[key] = value.lower() in ("true", "1", "yes")
            else:
                out[key] = kind(value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def config_from_args(args) -> TrainConfig:
    values = parse_config_file(args.config) if args.config is not None else {}
    for _, field, *_ in TRAIN_FLAGS + CHOICE_FLAGS + SWITCHES:
        v = getattr(args, field)
        if v is not None:
            values[field] = v
    try:
        return TrainConfig(**values)
    except ValueError as e:
        raise UsageError(str(e)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multiface", description=__doc__,
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/OpenMP threads; 1 keeps every run bit-for-bit reproducible")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("synth", help="generate a synthetic multi-face dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    s.add_argument("--out", type=Path, default=Path("synthetic.jsonl"), help="output JSONL path")
    s.add_argument("--images", type=int, default=500, help="number of images")
    s.add_argument("--dim", type=int, default=32, help="feature dimension D")
    s.add_argument("--sigma", type=float, default=0.1, help="per-face isotropic noise")
    s.add_argument("--theta", type=float, default=math.pi / 2,
                   help="angle in radians between the real and the forged direction")
    s.add_argument("--fake-frac", type=float, default=0.3, help="per-face forgery probability")
    s.add_argument("--faces-min", type=int, default=2, help="fewest faces per image")
    s.add_argument("--faces-max", type=int, default=5, help="most faces per image")
    s.add_argument("--seed", type=int, default=0, help="generator seed")

    t = sub.add_parser("train", help="train the detection head",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    t.add_argument("--data", type=Path, default=Path("synthetic.jsonl"), help="training JSONL dataset")
    t.add_argument("--val-data", type=Path, default=None,
                   help="held-out JSONL dataset; without it --val-fraction of --data is held out")
    t.add_argument("--out-ckpt", type=Path, default=Path("model.ckpt"),
                   help="final checkpoint; per-epoch ones go next to it as NAME.eNN.ckpt")
    t.add_argument("--log", type=Path, default=None, help="per-epoch CSV loss log (default OUT_CKPT.log.csv)")
    _add_model_flags(t)

    e = sub.add_parser("eval", help="score a dataset and write a metrics report",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    e.add_argument("--ckpt", type=Path, default=Path("model.ckpt"), help="checkpoint to evaluate")
    e.add_argument("--data", type=Path, default=Path("synthetic.jsonl"), help="JSONL dataset to score")
    e.add_argument("--report", type=Path, default=Path("report.json"), help="output metrics JSON")
    e.add_argument("--track-level", action="store_true", help="also report track-level AUC/ACC")
    e.add_argument("--overlays", type=Path, default=None,
                   help="directory for per-image overlay JSON (bbox, score, label)")

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    g.add_argument("--op", default=None, help="check one op only (default all)")
    g.add_argument("--seed", type=int, default=0, help="seed for the random check points")
    g.add_argument("--points", type=int, default=None, help="random points per op (default per-op setting)")
    g.add_argument("--tol", type=float, default=1e-4, help="relative-error threshold")

    h = sub.add_parser("heatmap", help="export learned-feature similarity heatmaps per checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    h.add_argument("--ckpt", type=Path, nargs="+", default=[Path("model.ckpt")],
                   help="one or more checkpoints, e.g. the per-epoch ones")
    h.add_argument("--data", type=Path, default=Path("synthetic.jsonl"), help="JSONL dataset")
    h.add_argument("--group-index", type=int, default=0, help="which similarity group to probe")
    h.add_argument("--out", type=Path, default=Path("heatmap"), help="output prefix")

    a = sub.add_parser("ablate", help="train the component-removal rows and compare",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    a.add_argument("--data", type=Path, default=Path("synthetic.jsonl"), help="training JSONL dataset")
    a.add_argument("--val-data", type=Path, default=None,
                   help="held-out JSONL dataset; without it --val-fraction of --data is held out")
    a.add_argument("--out", type=Path, default=Path("ablation"), help="output directory")
    _add_model_flags(a)
    return p


def cmd_synth(args) -> int:
    from .dataset import SyntheticConfig, gen_synthetic, save_dataset
    cfg = SyntheticConfig(num_images=args.images, faces_per_image=(args.faces_min, args.faces_max),
                          fake_fraction=args.fake_frac, feature_dim=args.dim,
                          sigma=args.sigma, theta=args.theta)
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    ds = gen_synthetic(cfg, args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.images)} images / {ds.n_faces} faces to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .trainer import train
    cfg = config_from_args(args)
    ds = load_dataset(args.data)
    val = load_dataset(args.val_data) if args.val_data is not None else None
    log_path = args.log if args.log is not None else args.out_ckpt.with_name(args.out_ckpt.name + ".log.csv")
    args.out_ckpt.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = train(ds, cfg, out_ckpt=args.out_ckpt, log_path=log_path, val=val)
    last = res.history[-1]
    print(f"trained {cfg.epochs} epochs in {time.perf_counter() - t0:.1f}s: "
          f"L_total={last['L_total']:.4f} val_face_auc={last['val_face_auc']:.4f} "
          f"val_image_acc={last['val_image_acc']:.4f}")
    print(f"checkpoint {args.out_ckpt}, log {log_path}")
    return 0


def cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .metrics import export_overlay, metrics_report
    from .model import predict
    from .trainer import load_checkpoint
    ck = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    if ds.feature_dim != ck.feature_dim:
        raise ValueError(f"dataset feature_dim {ds.feature_dim} != checkpoint feature_dim {ck.feature_dim}")
    face_scores, image_scores = predict(ck.params, ds.images, ck.config)
    report = metrics_report(ds.images, face_scores, image_scores, track_level=args.track_level)
    args.report.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if args.overlays is not None:
        args.overlays.mkdir(parents=True, exist_ok=True)
        for img, fs, s in zip(ds.images, face_scores, image_scores):
            export_overlay(img, args.overlays / f"{img.image_id}.json", fs, float(s))
    print(json.dumps(report))
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import CASES, run_gradcheck
    names = list(CASES) if args.op is None else [args.op]
    for n in names:
        if n not in CASES:
            raise UsageError(f"unknown op {n!r}; choose from: {', '.join(CASES)}")
    failed = []
    for n in names:
        rep = run_gradcheck(n, seed=args.seed, points=args.points)
        ok = rep.max_rel_err < args.tol
        if not ok:
            failed.append(n)
        print(f"{n:24s} max_rel_err={rep.max_rel_err:.3e} {'ok' if ok else 'FAIL'}")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_heatmap(args) -> int:
    from .dataset import load_dataset
    from .heatmap import export_sequence
    from .trainer import load_checkpoint
    cks = [load_checkpoint(p) for p in args.ckpt]
    ds = load_dataset(args.data)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    side = export_sequence(cks, ds, args.group_index, args.out)
    for e in side["epochs"]:
        print(f"epoch {e['epoch']}: {e['csv']} within-minus-cross={e['contrast']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation
    from .dataset import load_dataset
    cfg = config_from_args(args)
    ds = load_dataset(args.data)
    val = load_dataset(args.val_data) if args.val_data is not None else None
    rows = run_ablation(ds, cfg, val=val, out_dir=args.out)
    for r in rows:
        print(f"{r['row']:10s} face_auc={_fmt(r['face_auc'])} image_acc={_fmt(r['image_acc'])}")
    print(f"comparison written to {args.out / 'ablation.csv'}")
    return 0


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "heatmap": cmd_heatmap,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("multiface: error: a command is required", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("multiface: error: --threads must be >= 1", file=sys.stderr)
        return 2
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"multiface {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError, IndexError) as e:
        print(f"multiface {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
