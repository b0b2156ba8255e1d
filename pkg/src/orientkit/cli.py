"""``orientkit`` command line: train, adapt, orient, eval, make-synthetic.

Exit codes: 0 success, 2 bad configuration or dataset, 3 empty support when
orienting, 4 benchmark layout error, 5 I/O failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evaluation import (
    RHO_DESK,
    RHO_PAPER,
    RigidTransform,
    baseline_covariance_orienter,
    make_synthetic_benchmark,
    score_model,
)
from .persist import Checkpoint, CheckpointError, load_checkpoint, read_config, save_checkpoint
from .rotations import matrix_to_euler
from .signals import EmptySupport, read_cloud, write_cloud
from .training import ConfigError, OcclusionConfig, format_history, orient, train

EXIT_CONFIG, EXIT_SUPPORT, EXIT_LAYOUT, EXIT_IO = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# ------------------------------------------------------------------- dataset


def load_dataset(path) -> list:
    """All ``*.xyz`` clouds below ``path`` in sorted order."""
    root = Path(path)
    if not root.is_dir():
        raise CliError(f"dataset directory not found: {root}", EXIT_CONFIG)
    files = sorted(root.rglob("*.xyz"))
    if not files:
        raise CliError(f"no .xyz clouds in dataset directory: {root}", EXIT_CONFIG)
    clouds = []
    for f in files:
        try:
            clouds.append(read_cloud(f))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read cloud {f}: {exc}", EXIT_CONFIG) from exc
    return clouds


def read_benchmark(path):
    """``[(name, clouds, transforms)]`` from the ``model_k/view_j.xyz`` + ``gt.txt`` layout."""
    root = Path(path)
    if not root.is_dir():
        raise CliError(f"benchmark directory not found: {root}", EXIT_LAYOUT)
    models = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        views = sorted(d.glob("view_*.xyz"), key=lambda p: int(p.stem.split("_")[1]))
        gt = d / "gt.txt"
        if not views:
            continue
        if not gt.is_file():
            raise CliError(f"missing ground truth: {gt}", EXIT_LAYOUT)
        try:
            rows = np.loadtxt(gt, ndmin=2)
            clouds = [read_cloud(v) for v in views]
        except (OSError, ValueError) as exc:
            raise CliError(f"unreadable benchmark model {d}: {exc}", EXIT_LAYOUT) from exc
        if rows.shape != (len(views), 12):
            raise CliError(f"{gt}: expected {len(views)} lines of 12 floats", EXIT_LAYOUT)
        models.append((d.name, clouds, [RigidTransform.from_row(r) for r in rows]))
    if not models:
        raise CliError(f"no model_*/view_*.xyz data in {root}", EXIT_LAYOUT)
    return models


def write_benchmark(path, models) -> None:
    root = Path(path)
    for k, m in enumerate(models):
        d = root / f"model_{k}"
        d.mkdir(parents=True, exist_ok=True)
        for j, v in enumerate(m.views):
            write_cloud(d / f"view_{j}.xyz", v.cloud)
        rows = [" ".join(_fmt(x) for x in v.transform.to_row()) for v in m.views]
        (d / "gt.txt").write_text("\n".join(rows) + "\n")


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    resume = None
    if args.resume:
        try:
            resume = load_checkpoint(args.resume)
        except OSError as exc:
            raise CliError(f"cannot read checkpoint {args.resume}: {exc.strerror}", EXIT_IO) from exc
    if args.config:
        cfg = read_config(args.config)
    elif resume is not None:
        cfg = resume.config
    else:
        raise CliError("a config file is required unless resuming from a checkpoint", EXIT_CONFIG)
    overrides = {k: v for k, v in (("epochs", args.epochs), ("val_split", args.val_split),
                                   ("seed", args.seed)) if v is not None}
    cfg = replace(cfg, **overrides).validate()
    dataset = load_dataset(args.data)
    kwargs = {}
    if resume is not None:
        kwargs = dict(params=resume.params, adam=resume.adam, start_epoch=resume.epoch,
                      lr_scale=resume.lr_scale)
    result = train(dataset, cfg, **kwargs)
    out = Path(args.checkpoint)
    history = Path(args.history) if args.history else out.with_suffix(".history.txt")
    try:
        save_checkpoint(out, Checkpoint(result.params, result.adam, result.epoch, cfg,
                                        result.lr_scale))
        history.write_text(format_history(result))
    except OSError as exc:
        raise CliError(f"cannot write {exc.filename}: {exc.strerror}", EXIT_IO) from exc
    print(f"best_epoch {result.best_epoch} val_loss "
          f"{_fmt(min([result.initial_val_loss] + [h.val_loss for h in result.history]))}")
    return 0


def _load_ckpt(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}", EXIT_IO) from exc


def cmd_orient(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    try:
        cloud = read_cloud(args.cloud)
    except OSError as exc:
        raise CliError(f"cannot read cloud {args.cloud}: {exc.strerror}", EXIT_IO) from exc
    except ValueError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    radius = args.radius if args.radius is not None else ckpt.config.radius
    try:
        g, canonical = orient(ckpt.params, cloud, radius)
    except EmptySupport as exc:
        raise CliError(f"{args.cloud}: {exc}", EXIT_SUPPORT) from exc
    if args.format in ("matrix", "both"):
        print(" ".join(_fmt(x) for x in g.ravel()))
    if args.format in ("euler", "both"):
        print(" ".join(_fmt(x) for x in matrix_to_euler(g)))
    if args.out:
        try:
            write_cloud(args.out, canonical)
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc.strerror}", EXIT_IO) from exc
    return 0


def evaluate(ckpt: Checkpoint, models, rhos, spacing: float, radius: float):
    """Rows ``(name, scores)`` for every model, the mean and the covariance baseline."""
    net = lambda c: orient(ckpt.params, c, radius)[0]  # noqa: E731
    rows, base = [], []
    for name, clouds, transforms in models:
        rows.append((name, score_model(clouds, transforms, net, rhos, spacing, radius)))
        base.append(score_model(clouds, transforms, baseline_covariance_orienter, rhos,
                                spacing, radius))
    rows.append(("mean", np.nanmean([r[1] for r in rows], axis=0)))
    rows.append(("baseline", np.nanmean(base, axis=0)))
    return rows


def format_table(rows, rhos, sep: str | None = None) -> str:
    head = ["model"] + [f"rho={r:.4g}" for r in rhos]
    body = [[name] + [f"{x:.6f}" for x in vals] for name, vals in rows]
    if sep is not None:
        return "\n".join(sep.join(r) for r in [head] + body) + "\n"
    width = max(len(r[0]) for r in [head] + body)
    lines = [f"{r[0]:<{width}}  " + "  ".join(f"{c:>10}" for c in r[1:]) for r in [head] + body]
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    models = read_benchmark(args.benchmark)
    rhos = args.rho or [RHO_PAPER, RHO_DESK]
    radius = args.radius if args.radius is not None else ckpt.config.radius
    rows = evaluate(ckpt, models, rhos, args.spacing, radius)
    sys.stdout.write(format_table(rows, rhos))
    if args.tsv:
        try:
            Path(args.tsv).write_text(format_table(rows, rhos, sep="\t"))
        except OSError as exc:
            raise CliError(f"cannot write {args.tsv}: {exc.strerror}", EXIT_IO) from exc
    return 0


def cmd_make_synthetic(args) -> int:
    occ = OcclusionConfig(apply_probability=args.occlusion)
    models = make_synthetic_benchmark(args.models, args.views, np.random.default_rng(args.seed), occ)
    try:
        write_benchmark(args.out, models)
    except OSError as exc:
        raise CliError(f"cannot write benchmark to {args.out}: {exc.strerror}", EXIT_IO) from exc
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="orientkit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = ap.add_subparsers(dest="command", required=True)

    def train_args(p, adapt: bool):
        p.add_argument("--config", help="key = value config file (optional when resuming)")
        p.add_argument("--data", required=True, help="directory of .xyz clouds (searched recursively)")
        p.add_argument("--checkpoint", required=True, help="output checkpoint path")
        p.add_argument("--history", help="output history table (default: <checkpoint>.history.txt)")
        p.add_argument("--resume", required=adapt, help="checkpoint to continue from")
        p.add_argument("--epochs", type=int, default=2 if adapt else None)
        p.add_argument("--val-split", type=float, default=0.2 if adapt else None)
        p.add_argument("--seed", type=int)
        p.set_defaults(func=cmd_train)

    p = sub.add_parser("train", help="self-supervised training")
    train_args(p, adapt=False)
    p.add_argument("--adapt", action="store_true",
                   help="test-time adaptation: resume and default to 2 epochs, 20%% validation")
    train_args(sub.add_parser("adapt", help="short retraining from a checkpoint"), adapt=True)

    p = sub.add_parser("orient", help="canonical orientation of one cloud")
    p.add_argument("checkpoint")
    p.add_argument("cloud")
    p.add_argument("--radius", type=float, help="support radius (default: training radius)")
    p.add_argument("--out", help="write the canonically oriented cloud here")
    p.add_argument("--format", choices=("matrix", "euler", "both"), default="both")
    p.set_defaults(func=cmd_orient)

    p = sub.add_parser("eval", help="LRF repeatability on a benchmark directory")
    p.add_argument("checkpoint")
    p.add_argument("benchmark")
    p.add_argument("--rho", type=float, action="append", help="cosine threshold (repeatable)")
    p.add_argument("--spacing", type=float, default=0.0,
                   help="keypoint spacing; 0 scores one frame per view about its centroid")
    p.add_argument("--radius", type=float, help="patch radius (default: training radius)")
    p.add_argument("--tsv", help="also write the table as tab-separated values")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-synthetic", help="write a synthetic multi-view benchmark")
    p.add_argument("out")
    p.add_argument("--models", type=int, default=20)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--occlusion", type=float, default=0.5, help="occlusion probability per view")
    p.set_defaults(func=cmd_make_synthetic)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    if getattr(args, "adapt", False):
        if not args.resume:
            print("orientkit: --adapt needs --resume CHECKPOINT", file=sys.stderr)
            return EXIT_CONFIG
        args.epochs = 2 if args.epochs is None else args.epochs
        args.val_split = 0.2 if args.val_split is None else args.val_split
    try:
        return args.func(args)
    except CliError as exc:
        print(f"orientkit: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, CheckpointError) as exc:
        print(f"orientkit: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
