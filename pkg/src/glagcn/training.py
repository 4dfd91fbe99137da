"""Losses, optimizer, two-stage training loop and the finite-difference checker."""
from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Sequence

import numpy as np

from .data import Batch, PoseWindow, collate
from .errors import ConfigError, NumericError, ShapeError
from .network import (GlaGcnModel, ModelConfig, backward, build_model, flip_window, forward,
                      infer_with_flip)
from .skeleton import SkeletonGraph, build_skeleton, flip_permutation

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# losses


def loss_global(recon_seq: np.ndarray, gt_seq: np.ndarray) -> float:
    """Mean per-joint, per-frame Euclidean error of ``(B, 3, T, N)`` sequences."""
    return loss_global_grad(recon_seq, gt_seq)[0]


def loss_global_grad(recon_seq: np.ndarray, gt_seq: np.ndarray) -> tuple[float, np.ndarray]:
    if recon_seq.shape != gt_seq.shape or recon_seq.ndim != 4 or recon_seq.shape[1] != 3:
        raise ShapeError(f"expected matching (B, 3, T, N) sequences, got {recon_seq.shape} and {gt_seq.shape}")
    diff = recon_seq - gt_seq
    norm = np.sqrt((diff * diff).sum(axis=1, keepdims=True))
    count = norm.size
    safe = np.where(norm > 0, norm, 1.0)
    return float(norm.sum() / count), np.where(norm > 0, diff / safe, 0.0) / count


def loss_local(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-joint Euclidean error of ``(..., N, 3)`` poses."""
    return loss_local_grad(pred, gt)[0]


def loss_local_grad(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeError(f"expected matching (..., N, 3) poses, got {pred.shape} and {gt.shape}")
    diff = pred - gt
    norm = np.sqrt((diff * diff).sum(axis=-1, keepdims=True))
    count = norm.size
    safe = np.where(norm > 0, norm, 1.0)
    return float(norm.sum() / count), np.where(norm > 0, diff / safe, 0.0) / count


# --------------------------------------------------------------------------
# augmentation


def augment_flip(window: PoseWindow, flip_perm: np.ndarray) -> PoseWindow:
    """Horizontal mirror of a window: negate x everywhere and swap left/right joints."""
    def mirror(a):
        if a is None:
            return None
        out = a[..., flip_perm, :].copy()
        out[..., 0] *= -1
        return out

    return replace(window, input2d=mirror(window.input2d), target3d=mirror(window.target3d),
                   seq3d=mirror(window.seq3d))


def _flip_batch(batch: Batch, perm: np.ndarray, which: np.ndarray) -> Batch:
    if not which.any():
        return batch
    x, target, seq = batch.x.copy(), batch.target.copy(), batch.seq.copy()
    x[which] = flip_window(x[which], perm)
    t = target[which][:, perm]
    t[..., 0] *= -1
    target[which] = t
    s = seq[which][..., perm]
    s[:, 0] *= -1
    seq[which] = s
    return Batch(x, target, seq)


# --------------------------------------------------------------------------
# optimizers


class AdamW:
    """Adam with decoupled weight decay; state is keyed by parameter name."""

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, lr: float = 0.01, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.buf: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        for name, p in params.items():
            b = self.buf.setdefault(name, np.zeros_like(p))
            b *= self.momentum
            b += grads[name]
            p -= (lr * b).astype(p.dtype)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.01
    epochs: int = 10
    stage_boundary_epoch: int | None = None  # None -> epochs // 2
    dropout: float | None = 0.1  # None keeps the model's own rate
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_decay: float = 1.0  # per-epoch multiplicative factor; 1.0 keeps the rate constant
    flip_augment: bool = True
    eval_flip: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage_boundary_epoch is None:
            self.stage_boundary_epoch = self.epochs // 2
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and learning_rate >= 0 required")
        if not 0 <= self.stage_boundary_epoch <= self.epochs:
            raise ConfigError(f"stage_boundary_epoch={self.stage_boundary_epoch} must lie in [0, epochs={self.epochs}]")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    loss_global: float
    loss_local: float
    loss_total: float
    val_mpjpe: float
    seconds: float
    steps: int


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    best_state: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "stage", "loss_global", "loss_local", "loss_total", "val_mpjpe", "seconds"])
            for r in self.epochs:
                w.writerow([r.epoch, r.stage, f"{r.loss_global:.6g}", f"{r.loss_local:.6g}",
                            f"{r.loss_total:.6g}", f"{r.val_mpjpe:.6g}", f"{r.seconds:.3f}"])


def _check_finite(**arrays) -> None:
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {name}")


def compute_gradients(model: GlaGcnModel, batch: Batch, stage: int, mode="train",
                      rng: np.random.Generator | None = None, update_stats: bool | None = None):
    """Forward + backward for one objective; returns (metrics, grads)."""
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    if batch.target is None:
        raise ShapeError("training batch needs 3D targets")
    res = forward(model, batch.x, mode, rng, update_stats)
    dtype = model.dtype
    lg, dg = loss_global_grad(res.recon_seq, batch.seq.astype(dtype))
    ll, dl = loss_local_grad(res.center_pose, batch.target.astype(dtype))
    _check_finite(loss_global=np.float64(lg), loss_local=np.float64(ll))
    grads = backward(model, res, dl, dg if stage == 1 else None)
    for name in model.named_params():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for tensor {name}")
    total = lg + ll if stage == 1 else ll
    return {"loss_global": lg, "loss_local": ll, "loss_total": total}, grads


def train_step(model: GlaGcnModel, batch: Batch, stage: int, optimizer, rng: np.random.Generator | None = None,
               lr: float | None = None):
    """One optimizer update on ``batch``; stage 1 uses L_global + L_local, stage 2 L_local only."""
    if rng is None:
        rng = np.random.default_rng(0)
    metrics, grads = compute_gradients(model, batch, stage, "train", rng)
    params = model.named_params()
    if stage == 2:
        # momentum left over from stage 1 would otherwise keep moving the reconstruction head
        params = {k: v for k, v in params.items() if not k.startswith("recon_head.")}
    optimizer.step(params, grads, lr)
    model.touch()
    for name, p in params.items():
        if not np.all(np.isfinite(p)):
            raise NumericError(f"non-finite values in parameter {name} after the update")
    return metrics, optimizer


def make_optimizer(cfg: TrainConfig) -> AdamW:
    return AdamW(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)


def predict(model: GlaGcnModel, windows: Sequence[PoseWindow], flip: bool = True, batch_size: int = 256) -> np.ndarray:
    """Eval-mode centre-frame predictions ``(W, N, 3)`` for a list of windows."""
    perm = flip_permutation(model.skeleton)
    out = []
    for i in range(0, len(windows), batch_size):
        x = collate(windows[i:i + batch_size], model.dtype).x
        out.append(infer_with_flip(model, x, perm) if flip else forward(model, x, "eval").center_pose)
    return np.concatenate(out) if out else np.zeros((0, model.config.joints, 3))


def fit(model: GlaGcnModel, train_set: Sequence[PoseWindow], val_set: Sequence[PoseWindow] | None,
        config: TrainConfig, on_epoch: Callable[[EpochRecord], None] | None = None):
    """Two-stage mini-batch training; returns the model and per-epoch history."""
    from .evaluation import mpjpe_batch

    if not train_set:
        raise ConfigError("training set is empty")
    history = TrainHistory()
    if config.epochs == 0:
        return model, history
    if config.dropout is not None:
        for blk in model.blocks().values():
            blk.dropout = config.dropout
    rng = np.random.default_rng(config.seed)
    perm = flip_permutation(model.skeleton)
    opt = make_optimizer(config)
    lr = config.learning_rate
    best = np.inf
    steps = 0
    for epoch in range(config.epochs):
        stage = 1 if epoch < config.stage_boundary_epoch else 2
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        sums = np.zeros(3)
        count = 0
        for start in range(0, len(order), config.batch_size):
            batch = collate([train_set[i] for i in order[start:start + config.batch_size]], model.dtype)
            if config.flip_augment:
                batch = _flip_batch(batch, perm, rng.random(len(batch)) < 0.5)
            metrics, _ = train_step(model, batch, stage, opt, rng, lr)
            history.step_losses.append(metrics["loss_total"])
            sums += len(batch) * np.array([metrics["loss_global"], metrics["loss_local"], metrics["loss_total"]])
            count += len(batch)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        val = float("nan")
        if val_set:
            preds = predict(model, val_set, flip=config.eval_flip)
            val = float(mpjpe_batch(preds, np.stack([w.target3d for w in val_set]), model.skeleton.root).mean())
            if val < best:
                best = val
                history.best_epoch = epoch
                history.best_state = copy.deepcopy(model.state_dict())
        rec = EpochRecord(epoch, stage, *(sums / max(count, 1)), val, time.perf_counter() - t0, steps)
        history.epochs.append(rec)
        log.info("epoch %d stage %d L_global %.3f L_local %.3f val %.3f", epoch, stage,
                 rec.loss_global, rec.loss_local, val)
        if on_epoch is not None:
            on_epoch(rec)
        lr *= config.lr_decay
        if config.max_steps is not None and steps >= config.max_steps:
            break
    return model, history


# --------------------------------------------------------------------------
# gradient checking

TINY_SKELETON = {
    "name": "tiny5",
    "edges": [(0, 1), (0, 2), (0, 3), (3, 4)],
    "root": 0,
    "left_right_pairs": [(1, 2)],
    "joint_names": ["pelvis", "left_hip", "right_hip", "spine", "head"],
    "reference_pose": [(0.0, 0.0), (0.5, -0.1), (-0.5, -0.1), (0.0, 1.0), (0.1, 2.0)],
}

VARIANTS = {
    "full": {},
    "no-adaptive": {"no_adaptive": True},
    "no-strided": {"no_strided": True},
    "fc-head": {"fc_head": True},
    "swap-limbs": {"swap_limbs": True},
}


@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    variant: str
    tolerance: float
    epsilon: float
    entries: list[TensorCheck]
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def failed(self) -> list[str]:
        return [e.name for e in self.entries if not e.passed]

    def format(self) -> str:
        lines = [f"gradcheck variant={self.variant} tol={self.tolerance:g} eps={self.epsilon:g}"]
        for e in self.entries:
            lines.append(f"  {'ok  ' if e.passed else 'FAIL'} {e.name:<40s} max_rel={e.max_rel_error:.3e} n={e.checked}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'} ({len(self.entries)} tensors, {self.seconds:.1f}s)")
        return "\n".join(lines)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(joints=5, frames=9, channels=8, recon_depth=2, temporal_kernel=9, stride=3,
                dropout=0.0, lambda_mix=0.5, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


def randomize_for_check(model: GlaGcnModel, rng: np.random.Generator) -> None:
    """Move every tensor off its special initial value (zeros, unit BN) so all paths carry signal."""
    for name, p in model.named_params().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("B", "theta", "phi", "beta"):
            p[...] = rng.normal(0.0, 0.3, p.shape)
        elif leaf == "gamma":
            p[...] = rng.uniform(0.5, 1.5, p.shape)
    for name, b in model.named_buffers().items():
        if name.endswith("running_mean"):
            b[...] = rng.normal(0.0, 0.2, b.shape)
        else:
            b[...] = rng.uniform(0.5, 2.0, b.shape)
    model.touch()


def match_bn_statistics(model: GlaGcnModel, x: np.ndarray, rng: np.random.Generator) -> None:
    """Set running BN statistics near the batch statistics of ``x``, then jitter them.

    Arbitrary running statistics let activations grow several-fold per block;
    deep attention embeddings then end up so small that a fixed finite-difference
    step is no longer small relative to them.
    """
    bns = [bn for blk in model.blocks().values() for bn in (blk.bn_graph, blk.bn_temporal)]
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.momentum = 1.0
    forward(model, x, "train", update_stats=True)
    for bn, m in zip(bns, saved):
        bn.momentum = m
        bn.running_mean += rng.normal(0.0, 0.2, bn.running_mean.shape) * np.sqrt(bn.running_var)
        bn.running_var *= rng.uniform(0.7, 1.4, bn.running_var.shape)
    model.touch()


def calibrate_attention(model: GlaGcnModel, x: np.ndarray, target: float = 2.0) -> None:
    """Rescale each block's theta/phi so its largest attention logit is about ``target``.

    Random embeddings in deep blocks otherwise give saturated (one-hot)
    attention whose gradients vanish, which makes a finite-difference
    comparison meaningless.
    """
    for name, blk in model.blocks().items():
        if not blk.adaptive:
            continue
        cache = forward(model, x, "eval", update_stats=False).caches[name]
        g = cache.graph
        peak = np.abs(g["th"] @ g["ph"].transpose(0, 1, 3, 2)).max()
        if peak > 0:
            k = np.sqrt(target / peak)
            blk.theta *= k
            blk.phi *= k
    model.touch()


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest entry-wise deviation, scaled by the tensor's largest gradient entry."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(model_config: ModelConfig | None = None, tolerance: float = 1e-4, epsilon: float = 1e-5,
               *, variant: str = "full", batch: int = 2, seed: int = 0, max_entries: int | None = None,
               skeleton: SkeletonGraph | None = None, corrupt: dict[str, float] | None = None,
               mode: str = "eval") -> GradCheckReport:
    """Compare analytic gradients of L_global + L_local with central differences.

    Runs in float64 with dropout off.  ``mode="eval"`` uses running BN
    statistics; ``mode="train"`` normalizes with batch statistics (frozen
    running stats).  At most ``max_entries`` randomly chosen entries per
    tensor are perturbed (``None`` checks all).  ``corrupt`` scales named
    analytic gradients, for fault-injection tests.
    """
    t0 = time.perf_counter()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    cfg = model_config or tiny_config()
    cfg = replace(cfg, dtype="float64", dropout=0.0, **VARIANTS[variant])
    sk = skeleton or (build_skeleton(TINY_SKELETON) if cfg.joints == 5 else build_skeleton("h36m17"))
    rng = np.random.default_rng(seed)
    model = build_model(cfg, sk, seed)
    randomize_for_check(model, rng)
    n, t = cfg.joints, cfg.frames
    data = Batch(rng.normal(size=(batch, 2, t, n)), rng.normal(0, 300, size=(batch, n, 3)),
                 rng.normal(0, 300, size=(batch, 3, t, n)))
    match_bn_statistics(model, data.x, rng)
    calibrate_attention(model, data.x)

    def objective() -> float:
        res = forward(model, data.x, mode, update_stats=False)
        return loss_global(res.recon_seq, data.seq) + loss_local(res.center_pose, data.target)

    _, analytic = compute_gradients(model, data, 1, mode, update_stats=False)
    # central differences cannot resolve gradients below the objective's round-off
    noise_floor = max(1e-8, 4.0 * abs(objective()) * np.finfo(np.float64).eps / epsilon)
    entries = []
    for name, p in model.named_params().items():
        a = analytic[name]
        if corrupt and name in corrupt:
            a = a * corrupt[name]
        flat_idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            flat_idx = np.sort(rng.choice(p.size, max_entries, replace=False))
        num = np.empty(len(flat_idx))
        flat = p.reshape(-1)
        for k, i in enumerate(flat_idx):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = objective()
            flat[i] = orig - epsilon
            down = objective()
            flat[i] = orig
            num[k] = (up - down) / (2 * epsilon)
        err = relative_error(a.reshape(-1)[flat_idx], num, floor=noise_floor)
        entries.append(TensorCheck(name, err, len(flat_idx), err < tolerance))
    return GradCheckReport(variant, tolerance, epsilon, entries, time.perf_counter() - t0)
