"""Two-stage training on a small synthetic set; reports train L_local and held-out MPJPE.

    python scripts/overfit_synthetic.py --steps 2000
"""
from __future__ import annotations

import argparse
import json
import time
from dataclasses import dataclass

import numpy as np

from glagcn.data import collate, iter_windows, synth_generate
from glagcn.evaluation import mpjpe_batch
from glagcn.network import ModelConfig, build_model, forward
from glagcn.training import TrainConfig, fit, loss_local, predict


@dataclass
class OverfitResult:
    initial_local: float
    final_local: float
    untrained_val_mpjpe: float
    val_mpjpe: float
    steps: int
    seconds: float

    @property
    def local_ratio(self) -> float:
        return self.final_local / self.initial_local

    @property
    def val_improvement(self) -> float:
        return 1.0 - self.val_mpjpe / self.untrained_val_mpjpe


def train_local_loss(model, windows) -> float:
    """Center-pose loss over a window set, eval mode, no flip averaging."""
    batch = collate(windows, model.dtype)
    return loss_local(forward(model, batch.x, "eval").center_pose, batch.target)


def val_mpjpe(model, windows) -> float:
    preds = predict(model, windows, flip=False)
    return float(mpjpe_batch(preds, np.stack([w.target3d for w in windows]), model.skeleton.root).mean())


def run(steps: int = 2000, frames: int = 27, channels: int = 32, batch_size: int = 16,
        learning_rate: float = 0.001, lr_decay: float = 0.995, dropout: float = 0.0, seed: int = 0,
        verbose: bool = False) -> OverfitResult:
    # 2 sequences x 32 frames -> 64 windows; validation uses unseen motion
    train = iter_windows(synth_generate(sequences=2, frames=32, seed=seed), frames)
    val = iter_windows(synth_generate(sequences=2, frames=32, seed=seed + 1000, subject="S9"), frames)
    model = build_model(ModelConfig(frames=frames, channels=channels, dropout=dropout), seed=seed)
    initial = train_local_loss(model, train)
    untrained = val_mpjpe(model, val)
    epochs = -(-steps // -(-len(train) // batch_size))
    cfg = TrainConfig(batch_size=batch_size, learning_rate=learning_rate, epochs=epochs, dropout=dropout,
                      seed=seed, lr_decay=lr_decay, flip_augment=False, eval_flip=False, max_steps=steps)

    def report(rec):
        if verbose and (rec.epoch % 25 == 0 or rec.epoch == epochs - 1):
            print(f"epoch {rec.epoch:4d} stage {rec.stage} L_global {rec.loss_global:9.3f} "
                  f"L_local {rec.loss_local:9.3f} val {rec.val_mpjpe:9.3f}", flush=True)

    t0 = time.perf_counter()
    _, hist = fit(model, train, val if verbose else None, cfg, on_epoch=report)
    seconds = time.perf_counter() - t0
    return OverfitResult(initial, train_local_loss(model, train), untrained, val_mpjpe(model, val),
                         hist.epochs[-1].steps, seconds)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--lr", type=float, default=0.001)
    ap.add_argument("--lr-decay", type=float, default=0.995)
    ap.add_argument("--dropout", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quiet", action="store_true")
    a = ap.parse_args(argv)
    res = run(a.steps, batch_size=a.batch_size, learning_rate=a.lr, lr_decay=a.lr_decay, dropout=a.dropout,
              seed=a.seed, verbose=not a.quiet)
    out = dict(vars(res), local_ratio=res.local_ratio, val_improvement=res.val_improvement)
    print(json.dumps(out, indent=1))


if __name__ == "__main__":
    main()
