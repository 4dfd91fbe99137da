"""Train and evaluate every ablation variant on synthetic data and write one report per variant.

    python scripts/run_ablations.py --out runs/ablations --epochs 2
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from glagcn.data import iter_windows, save_checkpoint, synth_generate
from glagcn.evaluation import evaluate
from glagcn.network import ModelConfig, build_model, param_count
from glagcn.training import VARIANTS, TrainConfig, fit


def run(out: Path, epochs: int = 2, frames: int = 27, channels: int = 16, seed: int = 0) -> dict[str, dict]:
    out.mkdir(parents=True, exist_ok=True)
    train = iter_windows(synth_generate(4, 48, seed=seed), frames)
    val_files = synth_generate(2, 48, seed=seed + 1000, subject="S9")
    summary = {}
    for variant, flags in VARIANTS.items():
        model = build_model(ModelConfig(frames=frames, channels=channels, **flags), seed=seed)
        model, history = fit(model, train, iter_windows(val_files, frames),
                             TrainConfig(batch_size=16, epochs=epochs, learning_rate=1e-3, seed=seed))
        report = evaluate(model, val_files, "p1")
        stem = out / variant
        save_checkpoint(model, stem.with_suffix(".ckpt.json"))
        stem.with_suffix(".report.json").write_text(report.to_json())
        stem.with_suffix(".report.txt").write_text(report.to_table() + "\n")
        history.to_csv(stem.with_suffix(".history.csv"))
        summary[variant] = {"params": param_count(model), "mpjpe": report.overall.mpjpe,
                            "p_mpjpe": report.overall.p_mpjpe}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/ablations"))
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--frames", type=int, default=27)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    for variant, row in run(args.out, args.epochs, args.frames, args.channels, args.seed).items():
        print(f"{variant:<12s} params {row['params']:>8,d}  MPJPE {row['mpjpe']:8.1f}  P-MPJPE {row['p_mpjpe']:8.1f}")


if __name__ == "__main__":
    main()
