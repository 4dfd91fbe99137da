"""The full lifting network: reconstruction branch, strided stack, per-joint head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .layers import (AgcnBlockParams, BlockCache, Mode, block_backward, block_forward, to_channels_first,
                     to_channels_last,
                     init_block_params, temporal_out_length)
from .skeleton import AdjacencyStack, SkeletonGraph, adjacency_for, flip_permutation


@dataclass
class ModelConfig:
    joints: int = 17
    frames: int = 243
    channels: int = 96
    recon_depth: int = 2
    temporal_kernel: int = 9
    kernel_size: int = 3
    stride: int = 3
    dropout: float = 0.1
    lambda_mix: float = 0.5
    no_adaptive: bool = False
    no_strided: bool = False
    fc_head: bool = False
    swap_limbs: bool = False
    alpha: float = 0.001
    # network works in metres-ish units; outputs are multiplied back to millimetres
    output_scale: float = 1000.0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.joints < 1 or self.channels < 1 or self.recon_depth < 0:
            raise ConfigError("joints and channels must be >= 1, recon_depth >= 0")
        if self.stride < 2:
            raise ConfigError(f"stride must be >= 2, got {self.stride}")
        if self.frames < self.stride:
            raise ConfigError(f"frames={self.frames} must be at least the stride {self.stride}")
        if self.stride ** self.strided_modules != self.frames:
            raise ConfigError(f"frames={self.frames} is not a power of stride={self.stride}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError(f"temporal_kernel must be odd, got {self.temporal_kernel}")
        if self.kernel_size != 3:
            raise ConfigError(f"kernel_size must be 3, got {self.kernel_size}")
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ConfigError(f"lambda_mix must lie in [0, 1], got {self.lambda_mix}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.alpha <= 0 or self.output_scale <= 0:
            raise ConfigError("alpha and output_scale must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def strided_modules(self) -> int:
        return max(round(math.log(max(self.frames, 1), self.stride)), 1)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class HeadParams:
    """Individually connected head: ``lam * (v_i W_i + b_i) + (1 - lam) * (v_i W_s + b_s)``."""

    W_unshared: np.ndarray  # (N, C, 3)
    b_unshared: np.ndarray  # (N, 3)
    W_shared: np.ndarray  # (C, 3)
    b_shared: np.ndarray  # (3,)
    lambda_mix: float = 0.5

    def named_params(self) -> dict[str, np.ndarray]:
        return {"W_unshared": self.W_unshared, "b_unshared": self.b_unshared,
                "W_shared": self.W_shared, "b_shared": self.b_shared}


@dataclass
class FcHeadParams:
    """Ablation head: one affine map from all joint features to all coordinates."""

    W: np.ndarray  # (N*C, 3N), input flattened joint-major
    b: np.ndarray  # (3N,)

    def named_params(self) -> dict[str, np.ndarray]:
        return {"W_fc": self.W, "b_fc": self.b}


def _head_input(features: np.ndarray) -> np.ndarray:
    if features.ndim != 4 or features.shape[2] != 1:
        raise UsageError(f"head expects (batch, channels, 1, joints) features, got shape {features.shape}")
    return features[:, :, 0, :].transpose(0, 2, 1)  # (B, N, C)


def head_forward(features: np.ndarray, head: HeadParams | FcHeadParams) -> np.ndarray:
    """Per-joint 3D estimate from ``(B, C, 1, N)`` features; returns ``(B, N, 3)``."""
    v = _head_input(features)
    if isinstance(head, FcHeadParams):
        b, n, c = v.shape
        return (v.reshape(b, n * c) @ head.W + head.b).reshape(b, n, 3)
    if v.shape[1] != head.W_unshared.shape[0]:
        raise ShapeError(f"joints: features have {v.shape[1]}, head has {head.W_unshared.shape[0]}")
    lam = head.lambda_mix
    unshared = np.einsum("bnc,nck->bnk", v, head.W_unshared) + head.b_unshared
    shared = v @ head.W_shared + head.b_shared
    return lam * unshared + (1.0 - lam) * shared


def head_backward(features: np.ndarray, head: HeadParams | FcHeadParams, grad: np.ndarray):
    v = _head_input(features)
    b, n, c = v.shape
    if isinstance(head, FcHeadParams):
        g = grad.reshape(b, 3 * n)
        grads = {"W_fc": v.reshape(b, n * c).T @ g, "b_fc": g.sum(axis=0)}
        dv = (g @ head.W.T).reshape(b, n, c)
    else:
        lam = head.lambda_mix
        gu, gs = lam * grad, (1.0 - lam) * grad
        grads = {
            "W_unshared": np.einsum("bnc,bnk->nck", v, gu),
            "b_unshared": gu.sum(axis=0),
            "W_shared": np.einsum("bnc,bnk->ck", v, gs),
            "b_shared": gs.sum(axis=(0, 1)),
        }
        dv = np.einsum("bnk,nck->bnc", gu, head.W_unshared) + gs @ head.W_shared.T
    return dv.transpose(0, 2, 1)[:, :, None, :], grads


@dataclass
class GlaGcnModel:
    config: ModelConfig
    skeleton: SkeletonGraph
    adjacency: AdjacencyStack
    input_block: AgcnBlockParams
    middle_blocks: list[AgcnBlockParams]
    recon_head: AgcnBlockParams
    strided_modules: list[tuple[AgcnBlockParams, AgcnBlockParams]]
    head: HeadParams | FcHeadParams
    seed: int | None = None
    version: int = field(default=0, compare=False)

    def blocks(self) -> dict[str, AgcnBlockParams]:
        out = {"input": self.input_block}
        for i, b in enumerate(self.middle_blocks):
            out[f"middle.{i}"] = b
        out["recon_head"] = self.recon_head
        for i, (b1, b2) in enumerate(self.strided_modules):
            out[f"strided.{i}.block1"] = b1
            out[f"strided.{i}.block2"] = b2
        return out

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, blk in self.blocks().items():
            for name, arr in blk.named_params().items():
                out[f"{prefix}.{name}"] = arr
        for name, arr in self.head.named_params().items():
            out[f"head.{name}"] = arr
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, blk in self.blocks().items():
            for name, arr in blk.named_buffers().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.named_params(), **self.named_buffers()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays in place (keeps every view held by the block params valid)."""
        own = self.state_dict()
        for name, arr in state.items():
            if name not in own:
                raise KeyError(f"unknown tensor name {name!r}")
            if own[name].shape != np.shape(arr):
                raise ShapeError(f"{name}: expected shape {own[name].shape}, got {np.shape(arr)}")
            own[name][...] = arr
        self.touch()

    def touch(self) -> None:
        """Mark parameters as modified so old caches are rejected."""
        self.version += 1
        for blk in self.blocks().values():
            blk.version = self.version

    def shrink_schedule(self) -> list[int]:
        sizes = [self.config.frames]
        for _, b2 in self.strided_modules:
            sizes.append(temporal_out_length(sizes[-1], b2.stride))
        if self.config.no_strided:
            sizes.append(1)
        return sizes

    @property
    def dtype(self):
        return self.config.np_dtype


def build_model(config: ModelConfig, graph: SkeletonGraph | None = None, seed: int | None = 0) -> GlaGcnModel:
    """Assemble and initialize every block deterministically from ``seed``."""
    config.validate()
    if graph is None:
        from .skeleton import build_skeleton
        graph = build_skeleton("h36m17")
    if graph.joint_count != config.joints:
        raise ConfigError(f"config has {config.joints} joints, skeleton has {graph.joint_count}")
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    stack = adjacency_for(graph, config.kernel_size, config.alpha)
    c, n = config.channels, config.joints

    def block(c_in, c_out, stride=1, activate=True):
        return init_block_params(
            c_in, c_out, n, rng, stride=stride, subsets=config.kernel_size,
            temporal_kernel=config.temporal_kernel, dropout=config.dropout,
            adaptive=not config.no_adaptive, activate=activate, dtype=dtype)

    input_block = block(2, c)
    middle = [block(c, c) for _ in range(config.recon_depth)]
    recon_head = block(c, 3, activate=False)
    s = 1 if config.no_strided else config.stride
    strided = [(block(c, c), block(c, c, stride=s)) for _ in range(config.strided_modules)]

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    if config.fc_head:
        head: HeadParams | FcHeadParams = FcHeadParams(uniform((n * c, 3 * n), n * c), uniform((3 * n,), n * c))
    else:
        head = HeadParams(uniform((n, c, 3), c), uniform((n, 3), c), uniform((c, 3), c), uniform((3,), c),
                          lambda_mix=config.lambda_mix)
    return GlaGcnModel(config, graph, stack, input_block, middle, recon_head, strided, head, seed=seed)


@dataclass
class ForwardResult:
    recon_seq: np.ndarray  # (B, 3, T, N), millimetres
    center_pose: np.ndarray  # (B, N, 3), millimetres
    caches: dict = field(repr=False, default_factory=dict)
    temporal_sizes: list[int] = field(default_factory=list)


def _check_input(model: GlaGcnModel, x: np.ndarray) -> None:
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != 2 or x.shape[2] != cfg.frames or x.shape[3] != cfg.joints:
        raise ShapeError(f"input must be (batch, 2, {cfg.frames}, {cfg.joints}), got {x.shape}")


def forward(model: GlaGcnModel, window_2d: np.ndarray, mode: Mode = "eval",
            rng: np.random.Generator | None = None, update_stats: bool | None = None) -> ForwardResult:
    """Run the network on ``(B, 2, T, N)`` input."""
    _check_input(model, window_2d)
    cfg = model.config
    x = np.asarray(window_2d, dtype=model.dtype)
    if cfg.swap_limbs:
        x = x[..., flip_permutation(model.skeleton)]
    x = to_channels_last(x)  # blocks run on (B, T, N, C)
    stack = model.adjacency
    caches: dict[str, BlockCache] = {}

    def run(name, blk, h):
        out, caches[name] = block_forward(h, stack, blk, mode, rng, update_stats)
        return out

    h = run("input", model.input_block, x)
    for i, blk in enumerate(model.middle_blocks):
        h = run(f"middle.{i}", blk, h)
    recon = run("recon_head", model.recon_head, h)

    sizes = [h.shape[1]]
    s = h
    for i, (b1, b2) in enumerate(model.strided_modules):
        inner = run(f"strided.{i}.block2", b2, run(f"strided.{i}.block1", b1, s))
        s = inner + s[:, ::b2.stride]
        sizes.append(s.shape[1])
    if cfg.no_strided:
        caches["pool_frames"] = s.shape[1]
        s = s.mean(axis=1, keepdims=True)
        sizes.append(1)
    s = to_channels_first(s)
    caches["head_input"] = s
    center = head_forward(s, model.head) * cfg.output_scale
    return ForwardResult(to_channels_first(recon) * cfg.output_scale, center, caches, sizes)


def backward(model: GlaGcnModel, result: ForwardResult, grad_center: np.ndarray,
             grad_recon: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Parameter gradients given loss gradients w.r.t. the two outputs.

    ``grad_recon=None`` means the reconstruction output is outside the
    objective; its head then gets exactly-zero gradients.
    """
    caches = result.caches
    if not caches:
        raise UsageError("backward needs the caches of a forward pass")
    cfg = model.config
    grads: dict[str, np.ndarray] = {}

    def back(name, g):
        dx, bg = block_backward(caches[name], g)
        for k, v in bg.items():
            grads[f"{name}.{k}"] = v
        return dx

    ds, hg = head_backward(caches["head_input"], model.head, grad_center * cfg.output_scale)
    for k, v in hg.items():
        grads[f"head.{k}"] = v
    ds = to_channels_last(ds)
    if cfg.no_strided:
        t = caches["pool_frames"]
        ds = np.repeat(ds, t, axis=1) / t
    for i in reversed(range(len(model.strided_modules))):
        stride = model.strided_modules[i][1].stride
        g_inner = back(f"strided.{i}.block1", back(f"strided.{i}.block2", ds))
        g_inner[:, ::stride] += ds
        ds = g_inner
    dh = ds
    if grad_recon is not None:
        dh = dh + back("recon_head", to_channels_last(grad_recon * cfg.output_scale))
    else:
        for k, v in model.recon_head.named_params().items():
            grads[f"recon_head.{k}"] = np.zeros_like(v)
    for i in reversed(range(len(model.middle_blocks))):
        dh = back(f"middle.{i}", dh)
    back("input", dh)
    return grads


def flip_window(window_2d: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Mirror a ``(B, 2, T, N)`` batch horizontally: negate x, swap left/right joints."""
    out = window_2d[..., perm].copy()
    out[:, 0] *= -1
    return out


def unflip_pose(pose: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Mirror ``(B, N, 3)`` predictions back."""
    out = pose[:, perm].copy()
    out[..., 0] *= -1
    return out


def infer_with_flip(model: GlaGcnModel, window_2d: np.ndarray, flip_perm: np.ndarray | None = None) -> np.ndarray:
    """Eval-mode center pose averaged with the prediction for the mirrored input."""
    if flip_perm is None:
        flip_perm = flip_permutation(model.skeleton)
    plain = forward(model, window_2d, "eval").center_pose
    mirrored = forward(model, flip_window(window_2d, flip_perm), "eval").center_pose
    return 0.5 * (plain + unflip_pose(mirrored, flip_perm))


def param_breakdown(model: GlaGcnModel) -> dict[str, int]:
    counts = {"input": 0, "reconstruction": 0, "recon_head": 0, "strided": 0, "head": 0}
    for name, arr in model.named_params().items():
        branch = name.split(".")[0]
        key = {"input": "input", "middle": "reconstruction", "recon_head": "recon_head",
               "strided": "strided", "head": "head"}[branch]
        counts[key] += arr.size
    counts["total"] = sum(counts.values())
    return counts


def param_count(model: GlaGcnModel) -> int:
    return param_breakdown(model)["total"]
