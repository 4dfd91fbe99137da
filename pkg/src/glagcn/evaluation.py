"""MPJPE, Procrustes-aligned MPJPE, PCK/AUC and per-action report aggregation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError, UsageError, ValidationError

PCK_THRESHOLD = 150.0
AUC_GRID = np.linspace(0.0, 150.0, 31)

# Human3.6M action order used for column layout
H36M_ACTIONS = ("Directions", "Discussion", "Eating", "Greeting", "Phoning", "Photo", "Posing", "Purchases",
                "Sitting", "SittingDown", "Smoking", "Waiting", "WalkDog", "Walking", "WalkTogether")


class AlignmentError(ValidationError):
    """Procrustes alignment is undefined for the given point sets."""


def _pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeError(f"pred and gt must have matching (..., N, 3) shapes, got {pred.shape} and {gt.shape}")
    return pred, gt


def root_align(pose: np.ndarray, root_index: int | None) -> np.ndarray:
    if root_index is None:
        return pose
    return pose - pose[..., root_index:root_index + 1, :]


def mpjpe_batch(pred: np.ndarray, gt: np.ndarray, root_index: int | None = 0) -> np.ndarray:
    """Per-pose MPJPE for ``(..., N, 3)`` stacks."""
    pred, gt = _pair(pred, gt)
    d = root_align(pred, root_index) - root_align(gt, root_index)
    return np.linalg.norm(d, axis=-1).mean(axis=-1)


def mpjpe(pred: np.ndarray, gt: np.ndarray, root_index: int | None = 0) -> float:
    return float(np.mean(mpjpe_batch(pred, gt, root_index)))


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * pts @ self.rotation.T + self.translation


def procrustes_transform(pred: np.ndarray, gt: np.ndarray, rank_tol: float = 1e-9) -> SimilarityTransform:
    """Least-squares ``s R pred + t ~ gt`` with ``det R = +1``."""
    pred, gt = _pair(pred, gt)
    if pred.ndim != 2 or pred.shape[0] < 3:
        raise AlignmentError(f"alignment needs an (N >= 3, 3) pose, got {pred.shape}")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p0, g0 = pred - mu_p, gt - mu_g
    sv_g = np.linalg.svd(g0, compute_uv=False)
    if sv_g[0] == 0 or sv_g[1] <= rank_tol * sv_g[0]:
        raise AlignmentError("ground-truth points are coincident or collinear")
    norm_p = (p0 * p0).sum()
    if norm_p <= (rank_tol * sv_g[0]) ** 2:
        raise AlignmentError("predicted points are coincident")
    u, s, vt = np.linalg.svd(p0.T @ g0)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    signs = np.array([1.0, 1.0, d])
    rot = vt.T @ np.diag(signs) @ u.T
    scale = float((s * signs).sum() / norm_p)
    return SimilarityTransform(scale, rot, mu_g - scale * rot @ mu_p)


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return procrustes_transform(pred, gt).apply(np.asarray(pred, dtype=float))


def p_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-joint error after similarity alignment; accepts one pose or a stack (aligned per pose)."""
    pred, gt = _pair(pred, gt)
    if pred.ndim == 2:
        return float(np.linalg.norm(procrustes_align(pred, gt) - gt, axis=-1).mean())
    flat_p, flat_g = pred.reshape(-1, *pred.shape[-2:]), gt.reshape(-1, *gt.shape[-2:])
    return float(np.mean([p_mpjpe(p, g) for p, g in zip(flat_p, flat_g)]))


def p_mpjpe_batch(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred, gt = _pair(pred, gt)
    return np.array([p_mpjpe(p, g) for p, g in zip(pred, gt)])


def _joint_errors(preds, gts, root_index):
    preds, gts = _pair(preds, gts)
    return np.linalg.norm(root_align(preds, root_index) - root_align(gts, root_index), axis=-1)


def pck(preds: np.ndarray, gts: np.ndarray, threshold: float = PCK_THRESHOLD, root_index: int | None = 0) -> float:
    """Percentage of joints whose (root-aligned) error is at most ``threshold``."""
    if threshold <= 0:
        raise ValidationError(f"PCK threshold must be positive, got {threshold}")
    return float(100.0 * np.mean(_joint_errors(preds, gts, root_index) <= threshold))


def auc(preds: np.ndarray, gts: np.ndarray, threshold_grid: Sequence[float] = AUC_GRID,
        root_index: int | None = 0) -> float:
    """Mean PCK over a grid of thresholds (a zero threshold counts exact matches)."""
    err = _joint_errors(preds, gts, root_index).ravel()
    grid = np.asarray(threshold_grid, dtype=float)
    return float(100.0 * np.mean(err[None, :] <= grid[:, None]))


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricRow:
    mpjpe: float
    p_mpjpe: float
    pck_percent: float
    auc_percent: float
    sample_count: int


@dataclass
class EvalReport:
    protocol: str
    per_action: dict[str, MetricRow] = field(default_factory=dict)
    overall: MetricRow | None = None

    def to_json(self) -> str:
        return json.dumps({"protocol": self.protocol,
                           "per_action": {k: asdict(v) for k, v in self.per_action.items()},
                           "overall": asdict(self.overall) if self.overall else None}, indent=1)

    def to_table(self) -> str:
        """Actions as columns, one metric per row (Table-1 style)."""
        names = _ordered_actions(self.per_action)
        cols = names + ["Avg."]
        rows = [("MPJPE", "mpjpe"), ("P-MPJPE", "p_mpjpe"), ("PCK", "pck_percent"), ("AUC", "auc_percent")]
        head = self.protocol.upper()
        if head in ("P1", "P2", "PCK"):
            order = {"P1": 0, "P2": 1, "PCK": 2}[head]
            rows = [rows[order]] + [r for i, r in enumerate(rows) if i != order]
        width = max(8, *(len(c) + 1 for c in cols))
        lines = ["Metric".ljust(9) + "".join(c[:width - 1].rjust(width) for c in cols)]
        for label, attr in rows:
            vals = [getattr(self.per_action[a], attr) for a in names] + [getattr(self.overall, attr)]
            lines.append(label.ljust(9) + "".join(f"{v:{width}.1f}" for v in vals))
        lines.append("Count".ljust(9) + "".join(f"{self.per_action[a].sample_count:{width}d}" for a in names)
                     + f"{self.overall.sample_count:{width}d}")
        return "\n".join(lines)


def _ordered_actions(per_action: dict) -> list[str]:
    known = [a for a in H36M_ACTIONS if a in per_action]
    return known + sorted(a for a in per_action if a not in H36M_ACTIONS)


def aggregate(per_window: dict[str, np.ndarray], actions: Sequence[str], protocol: str = "p1",
              weighted: bool = True) -> EvalReport:
    """Average per-window metric arrays within each action, then across actions.

    ``per_window`` maps metric names (mpjpe, p_mpjpe, pck_percent,
    auc_percent) to arrays aligned with ``actions``.
    """
    actions = np.asarray(actions)
    report = EvalReport(protocol)
    keys = ("mpjpe", "p_mpjpe", "pck_percent", "auc_percent")
    for a in _ordered_actions({str(x): None for x in np.unique(actions)}):
        m = actions == a
        report.per_action[a] = MetricRow(*(float(np.mean(per_window[k][m])) for k in keys), int(m.sum()))
    rows = list(report.per_action.values())
    w = np.array([r.sample_count for r in rows], dtype=float) if weighted else np.ones(len(rows))
    report.overall = MetricRow(*(float(np.average([getattr(r, k) for r in rows], weights=w)) for k in keys),
                               int(sum(r.sample_count for r in rows)))
    return report


def evaluate(model, dataset, protocol: str = "p1", *, flip: bool = True, weighted: bool = True,
             pck_threshold: float = PCK_THRESHOLD, auc_grid: Sequence[float] = AUC_GRID,
             batch_size: int = 256) -> EvalReport:
    """Run flip-averaged inference over every window and aggregate all metrics per action.

    ``dataset`` is a list of pose files or of pose windows.
    """
    from .data import PoseSequenceFile, iter_windows
    from .training import predict

    if protocol not in ("p1", "p2", "pck"):
        raise ValidationError(f"protocol must be p1, p2 or pck, got {protocol!r}")
    items = list(dataset)
    if items and isinstance(items[0], PoseSequenceFile):
        if any(f.pose3d is None for f in items):
            raise UsageError("ground truth required: evaluation needs pose3d in every file")
        windows = iter_windows(items, model.config.frames)
    else:
        windows = items
    if not windows:
        raise UsageError("nothing to evaluate")
    if any(w.target3d is None for w in windows):
        raise UsageError("ground truth required: every window needs a 3D target")
    preds = predict(model, windows, flip=flip, batch_size=batch_size)
    gts = np.stack([w.target3d for w in windows])
    return report_from_predictions(preds, gts, [w.action for w in windows], model.skeleton.root, protocol,
                                   weighted=weighted, pck_threshold=pck_threshold, auc_grid=auc_grid)


def report_from_predictions(preds, gts, actions, root_index=0, protocol="p1", *, weighted=True,
                            pck_threshold=PCK_THRESHOLD, auc_grid=AUC_GRID) -> EvalReport:
    per = {
        "mpjpe": mpjpe_batch(preds, gts, root_index),
        "p_mpjpe": p_mpjpe_batch(preds, gts),
        "pck_percent": np.array([pck(p[None], g[None], pck_threshold, root_index) for p, g in zip(preds, gts)]),
        "auc_percent": np.array([auc(p[None], g[None], auc_grid, root_index) for p, g in zip(preds, gts)]),
    }
    return aggregate(per, actions, protocol, weighted)
