"""Command-line entry point: synth, train, eval, infer, gradcheck, info.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (including a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .data import (PoseSequenceFile, iter_windows, load_checkpoint, load_dataset, load_pose_file, make_windows,
                   save_checkpoint, save_pose_file, synth_generate)
from .errors import DataError, GlaGcnError, NumericError, ShapeError, UsageError, ValidationError
from .evaluation import evaluate
from .network import ModelConfig, build_model, param_breakdown
from .skeleton import PRESETS, build_skeleton
from .training import VARIANTS, TrainConfig, fit, grad_check, predict

log = logging.getLogger("glagcn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

ABLATIONS = {"no_adaptive": "--no-adaptive", "no_strided": "--no-strided", "fc_head": "--fc-head",
             "swap_limbs": "--swap-limbs"}


class _UsageExit(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so ``main`` can return a code."""

    def error(self, message):
        raise _UsageExit(message, self.format_usage())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="glagcn", description="Graph-based 2D-to-3D pose lifting")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="{synth,train,eval,infer,gradcheck,info}")
    sub.required = True

    s = sub.add_parser("synth", help="generate synthetic pose sequence files")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--sequences", type=int, default=4)
    s.add_argument("--frames", type=int, default=64)
    s.add_argument("--skeleton", default="h36m17", choices=PRESETS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0, help="2D pixel noise std")
    s.add_argument("--subject", default="S0")
    s.add_argument("--encoding", default="base64", choices=("base64", "sidecar"))

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--config", type=Path, help='JSON file {"model": {...}, "train": {...}}')
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--val", type=Path, help="held-out data directory for per-epoch MPJPE")
    t.add_argument("--out", required=True, type=Path, help="checkpoint manifest path")
    t.add_argument("--history", type=Path, help="per-epoch CSV (default: <out>.history.csv)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--frames", type=int)
    t.add_argument("--channels", type=int)
    t.add_argument("--max-steps", type=int)
    for field_name, flag in ABLATIONS.items():
        t.add_argument(flag, dest=field_name, action="store_true", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--protocol", default="p1", choices=("p1", "p2", "pck"))
    e.add_argument("--report", type=Path, help="JSON report path; an aligned-text table is written next to it")
    e.add_argument("--no-flip", action="store_true")

    i = sub.add_parser("infer", help="predict 3D poses for a 2D pose file")
    i.add_argument("--ckpt", required=True, type=Path)
    i.add_argument("--input", required=True, type=Path)
    i.add_argument("--output", required=True, type=Path)
    i.add_argument("--no-flip", action="store_true")

    g = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--variant", default="full", choices=tuple(VARIANTS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-entries", type=int, help="sample at most this many entries per tensor")

    n = sub.add_parser("info", help="print config, parameter count and shrink schedule")
    src = n.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path)
    src.add_argument("--config", type=Path, help="describe an untrained model built from a config file")
    return p


# --------------------------------------------------------------------------
# config handling


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None


def resolve_configs(args) -> tuple[ModelConfig, TrainConfig, dict]:
    """Merge config file values with command-line overrides."""
    raw = _read_json(args.config) if getattr(args, "config", None) else {}
    unknown = set(raw) - {"model", "train", "skeleton"}
    if unknown:
        raise ValidationError(f"config file: unknown sections {sorted(unknown)}")
    model_d = dict(raw.get("model", {}))
    train_d = dict(raw.get("train", {}))
    for field_name in ABLATIONS:
        if getattr(args, field_name, None):
            model_d[field_name] = True
    for key, val in (("frames", getattr(args, "frames", None)), ("channels", getattr(args, "channels", None))):
        if val is not None:
            model_d[key] = val
    for key, val in (("seed", getattr(args, "seed", None)), ("epochs", getattr(args, "epochs", None)),
                     ("batch_size", getattr(args, "batch_size", None)),
                     ("learning_rate", getattr(args, "lr", None)),
                     ("max_steps", getattr(args, "max_steps", None))):
        if val is not None:
            train_d[key] = val
    return ModelConfig.from_dict(model_d), TrainConfig.from_dict(train_d), raw


def describe(model) -> str:
    sizes = " ".join(str(s) for s in model.shrink_schedule())
    counts = param_breakdown(model)
    lines = ["config:"] + [f"  {k}: {v}" for k, v in model.config.to_dict().items()]
    lines.append(f"skeleton: {model.skeleton.name} ({model.skeleton.joint_count} joints)")
    lines.append("parameters:")
    lines += [f"  {k}: {v}" for k, v in counts.items()]
    lines.append(f"param_count: {counts['total']}")
    lines.append(f"schedule: {sizes}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    files = synth_generate(args.sequences, args.frames, args.skeleton, args.seed, args.noise, args.subject)
    args.out.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(files):
        save_pose_file(f, args.out / f"{k:03d}_{f.subject}_{f.action}.pseq", encoding=args.encoding)
    print(f"wrote {len(files)} sequences of {args.frames} frames to {args.out}")
    return EXIT_OK


def _load_data(path: Path) -> list[PoseSequenceFile]:
    files = load_dataset(path)
    if not files:
        raise DataError(f"{path}: no .pseq files found")
    return files


def cmd_train(args) -> int:
    model_cfg, train_cfg, raw = resolve_configs(args)
    files = _load_data(args.data)
    skeleton = files[0].skeleton
    if any(f.skeleton.joint_count != skeleton.joint_count for f in files):
        raise DataError(f"{args.data}: files use different skeletons")
    if any(f.pose3d is None for f in files):
        raise UsageError("ground truth required: training needs pose3d in every file")
    model_cfg = replace(model_cfg, joints=skeleton.joint_count)
    model = build_model(model_cfg, skeleton, seed=train_cfg.seed)
    train_set = iter_windows(files, model_cfg.frames)
    val_set = iter_windows(_load_data(args.val), model_cfg.frames) if args.val else None
    log.info("training on %d windows, %d parameters", len(train_set), param_breakdown(model)["total"])
    model, history = fit(model, train_set, val_set, train_cfg)
    if history.best_state is not None:
        model.load_state(history.best_state)
    save_checkpoint(model, args.out, extra={"train": asdict(train_cfg)})
    hist_path = args.history or args.out.with_name(args.out.name + ".history.csv")
    history.to_csv(hist_path)
    last = history.epochs[-1] if history.epochs else None
    if last is not None:
        print(f"epochs {len(history.epochs)} steps {last.steps} L_global {last.loss_global:.3f} "
              f"L_local {last.loss_local:.3f}")
    print(f"checkpoint: {args.out}\nhistory: {hist_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    files = _load_data(args.data)
    report = evaluate(model, files, args.protocol, flip=not args.no_flip)
    table = report.to_table()
    print(table)
    if args.report:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        args.report.write_text(report.to_json())
        args.report.with_suffix(".txt").write_text(table + "\n")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_checkpoint(args.ckpt)
    src = load_pose_file(args.input)
    if src.skeleton.joint_count != model.config.joints:
        raise DataError(f"{args.input}: has {src.skeleton.joint_count} joints but the model expects "
                        f"{model.config.joints}")
    windows = make_windows(src, model.config.frames)
    preds = predict(model, windows, flip=not args.no_flip)
    root = src.skeleton.root
    preds = preds - preds[:, root:root + 1]
    out = PoseSequenceFile(src.skeleton, src.subject, src.action, src.pose2d, preds.astype(np.float32),
                           src.units, src.image_size)
    save_pose_file(out, args.output)
    print(f"wrote {preds.shape[0]} root-relative 3D poses to {args.output}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = grad_check(tolerance=args.tol, epsilon=args.eps, variant=args.variant, seed=args.seed,
                        max_entries=args.max_entries)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_info(args) -> int:
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    else:
        model_cfg, train_cfg, raw = resolve_configs(args)
        graph = build_skeleton(raw.get("skeleton", "h36m17"))
        model = build_model(replace(model_cfg, joints=graph.joint_count), graph, seed=train_cfg.seed)
    print(describe(model))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "gradcheck": cmd_gradcheck, "info": cmd_info}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as exc:
        sys.stderr.write(f"{exc.usage}glagcn: error: {exc}\n")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except GlaGcnError as exc:
        sys.stderr.write(f"glagcn {args.command}: error: {exc}\n")
        return exit_code_for(exc)


def exit_code_for(exc: GlaGcnError) -> int:
    if isinstance(exc, (DataError, ShapeError)):
        return EXIT_DATA
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
