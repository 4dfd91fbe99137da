"""AGCN block: adaptive graph convolution, temporal convolution, batch norm,
ReLU, dropout and residual, each with a hand-written backward pass.

Feature maps are ``(batch, channels, frames, joints)`` arrays.  Every forward
function returns whatever the matching backward needs; nothing is stored on
the parameter objects except running batch-norm statistics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ShapeError, UsageError
from .skeleton import AdjacencyStack

Mode = Literal["train", "eval"]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "BatchNormParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))


@dataclass
class AgcnBlockParams:
    """Weights of one AGCN(C_in, C_out, S) block.

    ``W`` is ``(K, C_in, C_out)``; ``B`` is ``(K, N, N)``; ``theta``/``phi``
    are ``(K, C_in, C_e)``.  ``B``, ``theta`` and ``phi`` are ``None`` for the
    static (non-adaptive) variant.  ``activate=False`` drops the closing ReLU,
    which the 3-channel reconstruction head needs to emit signed coordinates.
    """

    W: np.ndarray
    tconv_w: np.ndarray  # (C_out, C_out, kernel)
    tconv_b: np.ndarray
    bn_graph: BatchNormParams
    bn_temporal: BatchNormParams
    B: np.ndarray | None = None
    theta: np.ndarray | None = None
    phi: np.ndarray | None = None
    res_w: np.ndarray | None = None  # (C_in, C_out)
    stride: int = 1
    dropout: float = 0.0
    activate: bool = True
    version: int = field(default=0, compare=False)

    @property
    def adaptive(self) -> bool:
        return self.B is not None

    @property
    def c_in(self) -> int:
        return self.W.shape[1]

    @property
    def c_out(self) -> int:
        return self.W.shape[2]

    @property
    def temporal_kernel(self) -> int:
        return self.tconv_w.shape[2]

    def named_params(self) -> dict[str, np.ndarray]:
        out = {"W": self.W}
        if self.adaptive:
            out.update(B=self.B, theta=self.theta, phi=self.phi)
        out.update({
            "tconv.weight": self.tconv_w, "tconv.bias": self.tconv_b,
            "bn_graph.gamma": self.bn_graph.gamma, "bn_graph.beta": self.bn_graph.beta,
            "bn_temporal.gamma": self.bn_temporal.gamma, "bn_temporal.beta": self.bn_temporal.beta,
        })
        if self.res_w is not None:
            out["res.weight"] = self.res_w
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {
            "bn_graph.running_mean": self.bn_graph.running_mean,
            "bn_graph.running_var": self.bn_graph.running_var,
            "bn_temporal.running_mean": self.bn_temporal.running_mean,
            "bn_temporal.running_var": self.bn_temporal.running_var,
        }


def embed_width(c_out: int) -> int:
    return max(c_out // 4, 1)


def init_block_params(
    c_in: int,
    c_out: int,
    n_joints: int,
    rng: np.random.Generator,
    *,
    stride: int = 1,
    subsets: int = 3,
    temporal_kernel: int = 9,
    dropout: float = 0.0,
    adaptive: bool = True,
    activate: bool = True,
    dtype=np.float64,
) -> AgcnBlockParams:
    """Fresh block: fan-in uniform projections, zero B/theta/phi, identity BN."""
    if temporal_kernel % 2 != 1:
        raise ShapeError(f"temporal kernel must be odd, got {temporal_kernel}")

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    ce = embed_width(c_out)
    p = AgcnBlockParams(
        W=uniform((subsets, c_in, c_out), subsets * c_in),
        tconv_w=uniform((c_out, c_out, temporal_kernel), c_out * temporal_kernel),
        tconv_b=uniform((c_out,), c_out * temporal_kernel),
        bn_graph=BatchNormParams.identity(c_out, dtype),
        bn_temporal=BatchNormParams.identity(c_out, dtype),
        stride=stride,
        dropout=dropout,
        activate=activate,
    )
    if adaptive:
        p.B = np.zeros((subsets, n_joints, n_joints), dtype)
        p.theta = np.zeros((subsets, c_in, ce), dtype)
        p.phi = np.zeros((subsets, c_in, ce), dtype)
    if c_in != c_out or stride != 1:
        p.res_w = uniform((c_in, c_out), c_in)
    return p


# --------------------------------------------------------------------------
# Internals run on channel-last ``(B, T, N, C)`` arrays so every channel
# projection is a single GEMM; the public functions take ``(B, C, T, N)``.


def to_channels_last(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_channels_first(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _stack_weights(w: np.ndarray) -> np.ndarray:
    """(K, C_in, C_out) -> (C_in, K*C_out)."""
    k, c, o = w.shape
    return w.transpose(1, 0, 2).reshape(c, k * o)


def _unstack_weights(w2: np.ndarray, k: int) -> np.ndarray:
    c = w2.shape[0]
    return w2.reshape(c, k, -1).transpose(1, 0, 2)


def _embed(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(B, T, N, C) x (K, C, Ce) -> (B, K, N, T*Ce)."""
    b, t, n, c = x.shape
    k, _, ce = w.shape
    e = (x.reshape(-1, c) @ _stack_weights(w)).reshape(b, t, n, k, ce)
    return e.transpose(0, 3, 2, 1, 4).reshape(b, k, n, t * ce)


def _unembed_grad(x: np.ndarray, w: np.ndarray, de: np.ndarray):
    """Backward of ``_embed``: returns (d weights (K, C, Ce), d x (B, T, N, C))."""
    b, t, n, c = x.shape
    k, _, ce = w.shape
    d2 = de.reshape(b, k, n, t, ce).transpose(0, 3, 2, 1, 4).reshape(-1, k * ce)
    dw = _unstack_weights(x.reshape(-1, c).T @ d2, k)
    dx = (d2 @ _stack_weights(w).T).reshape(b, t, n, c)
    return dw, dx


def attention_matrix(x: np.ndarray, w_theta: np.ndarray, w_phi: np.ndarray) -> np.ndarray:
    """Input-dependent joint affinity, one row-stochastic N x N matrix per sample.

    ``x`` is ``(B, C, T, N)``.  Accepts a single embedding pair ``(C, Ce)``
    (returns ``(B, N, N)``) or a stacked ``(K, C, Ce)`` pair (returns
    ``(B, K, N, N)``).
    """
    single = w_theta.ndim == 2
    if single:
        w_theta, w_phi = w_theta[None], w_phi[None]
    if x.shape[1] != w_theta.shape[1]:
        raise ShapeError(f"channels: input has {x.shape[1]}, embedding expects {w_theta.shape[1]}")
    xl = to_channels_last(x)
    th, ph = _embed(xl, w_theta), _embed(xl, w_phi)
    att = softmax_rows(th @ ph.transpose(0, 1, 3, 2))
    return att[:, 0] if single else att


# --------------------------------------------------------------------------
# graph convolution


def _check_graph_shapes(x: np.ndarray, stack: AdjacencyStack, p: AgcnBlockParams, layout="BTNC") -> None:
    if x.ndim != 4:
        raise ShapeError(f"feature map must have 4 axes, got {x.ndim}")
    c_ax, n_ax = (3, 2) if layout == "BTNC" else (1, 3)
    if x.shape[n_ax] != stack.joint_count:
        raise ShapeError(f"joints: input has {x.shape[n_ax]}, adjacency has {stack.joint_count}")
    if x.shape[c_ax] != p.c_in:
        raise ShapeError(f"channels: input has {x.shape[c_ax]}, block expects {p.c_in}")
    if p.W.shape[0] != stack.subset_count:
        raise ShapeError(f"subsets: W has {p.W.shape[0]}, adjacency has {stack.subset_count}")


def _graph_forward(x, stack, p):
    b, t, n, c = x.shape
    k, _, o = p.W.shape
    mix = np.asarray(stack.normalized, dtype=x.dtype)[None]  # (1|B, K, N, N)
    th = ph = att = None
    if p.adaptive:
        th, ph = _embed(x, p.theta), _embed(x, p.phi)
        att = softmax_rows(th @ ph.transpose(0, 1, 3, 2))
        mix = mix + p.B[None] + att
    # project first: z[b, t, j, k, o] = sum_c x[b, t, j, c] W[k, c, o]
    z = (x.reshape(-1, c) @ _stack_weights(p.W)).reshape(b, t, n * k, o)
    # mix2[b, i, (j, k)] = mix[b, k, i, j]
    mix2 = mix.transpose(0, 2, 3, 1).reshape(mix.shape[0], n, n * k)
    out = mix2[:, None] @ z  # (B, T, N, O)
    return out, dict(x=x, mix2=mix2, z=z, th=th, ph=ph, att=att)


def graph_conv_forward(x: np.ndarray, stack: AdjacencyStack, params: AgcnBlockParams) -> np.ndarray:
    """``sum_k (A_k + B_k + C_k)`` joint mixing with per-subset 1x1 projection ``W_k``.

    ``x`` and the result are ``(B, C, T, N)``.
    """
    _check_graph_shapes(x, stack, params, "BCTN")
    return to_channels_first(_graph_forward(to_channels_last(x), stack, params)[0])


def _graph_backward(cache, p: AgcnBlockParams, g: np.ndarray):
    x, mix2, z = cache["x"], cache["mix2"], cache["z"]
    b, t, n, c = x.shape
    k, _, o = p.W.shape
    dz = mix2[:, None].transpose(0, 1, 3, 2) @ g  # (B, T, N*K, O)
    dz2 = dz.reshape(-1, k * o)
    grads = {"W": _unstack_weights(x.reshape(-1, c).T @ dz2, k)}
    dx = (dz2 @ _stack_weights(p.W).T).reshape(b, t, n, c)
    if p.adaptive:
        dmix2 = (g @ z.transpose(0, 1, 3, 2)).sum(axis=1)  # (B, N, N*K)
        dmix = dmix2.reshape(b, n, n, k).transpose(0, 3, 1, 2)  # (B, K, N, N)
        grads["B"] = dmix.sum(axis=0)
        att, th, ph = cache["att"], cache["th"], cache["ph"]
        dlog = att * (dmix - (dmix * att).sum(axis=-1, keepdims=True))
        grads["theta"], dxt = _unembed_grad(x, p.theta, dlog @ ph)
        grads["phi"], dxp = _unembed_grad(x, p.phi, dlog.transpose(0, 1, 3, 2) @ th)
        dx += dxt
        dx += dxp
    return dx, grads


# --------------------------------------------------------------------------
# temporal convolution


def temporal_out_length(t_in: int, stride: int) -> int:
    return (t_in - 1) // stride + 1


def _taps(t_in: int, kern: int, stride: int):
    """For each kernel tap: (tap, first output frame, first input frame, count) of valid positions."""
    pad = (kern - 1) // 2
    t_out = temporal_out_length(t_in, stride)
    out = []
    for tap in range(kern):
        d = tap - pad
        lo = (-d + stride - 1) // stride if d < 0 else 0
        hi = min(t_out - 1, (t_in - 1 - d) // stride) if t_in - 1 - d >= 0 else -1
        if hi >= lo:
            out.append((tap, lo, lo * stride + d, hi - lo + 1))
    return out


def _frames(x, start, count, stride):
    """Frames ``start, start+stride, ...`` of a (B, T, N, C) array as (B, count*N, C)."""
    b, _, n, c = x.shape
    sl = x[:, start:start + stride * (count - 1) + 1:stride]
    if stride != 1:
        sl = np.ascontiguousarray(sl)
    return sl.reshape(b, count * n, c)


def _temporal_forward(x, w, bias, stride):
    b, t, n, c = x.shape
    if t < 1:
        raise ShapeError("frames: temporal convolution needs at least one frame")
    if c != w.shape[1]:
        raise ShapeError(f"channels: input has {c}, temporal kernel expects {w.shape[1]}")
    o, _, kern = w.shape
    t_out = temporal_out_length(t, stride)
    out = np.empty((b, t_out, n, o), dtype=x.dtype)
    out[...] = bias
    taps = _taps(t, kern, stride)
    w_taps = np.ascontiguousarray(w.transpose(2, 1, 0))  # (kern, C, O); contiguous keeps matmul on BLAS
    for tap, lo, start, count in taps:
        out[:, lo:lo + count] += (_frames(x, start, count, stride) @ w_taps[tap]).reshape(b, count, n, o)
    return out, dict(x=x, taps=taps)


def temporal_conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """1 x kernel convolution along frames with symmetric zero padding.

    ``x`` is ``(B, C, T, N)``; output has ``(T - 1) // stride + 1`` frames.
    """
    if weight.shape[2] % 2 != 1:
        raise ShapeError(f"temporal kernel must be odd, got {weight.shape[2]}")
    if x.ndim != 4 or x.shape[2] < 1:
        raise ShapeError(f"frames: need a (B, C, T >= 1, N) input, got {x.shape}")
    return to_channels_first(_temporal_forward(to_channels_last(x), weight, bias, stride)[0])


def _temporal_backward(cache, w, stride, g):
    x = cache["x"]
    b, t, n, c = x.shape
    o = w.shape[0]
    dw = np.zeros_like(w)
    dx = np.zeros_like(x)
    db = g.sum(axis=(0, 1, 2))
    w_taps = np.ascontiguousarray(w.transpose(2, 0, 1))  # (kern, O, C)
    for tap, lo, start, count in cache["taps"]:
        gs = g[:, lo:lo + count].reshape(b, count * n, o)
        xs = _frames(x, start, count, stride)
        dw[:, :, tap] = np.einsum("bmc,bmo->oc", xs, gs, optimize=True)
        contrib = (gs @ w_taps[tap]).reshape(b, count, n, c)
        dx[:, start:start + stride * (count - 1) + 1:stride] += contrib
    return dx, dw, db


# --------------------------------------------------------------------------
# batch norm (channel axis last)


def _bn_forward(x, bn: BatchNormParams, batch_stats: bool, update_stats: bool):
    axes = (0, 1, 2)
    if batch_stats:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            m = x.size // x.shape[-1]
            unbiased = var * m / max(m - 1, 1)
            bn.running_mean *= 1 - bn.momentum
            bn.running_mean += bn.momentum * mean
            bn.running_var *= 1 - bn.momentum
            bn.running_var += bn.momentum * unbiased
    else:
        mean, var = bn.running_mean, bn.running_var
    inv = (1.0 / np.sqrt(var + bn.eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)) * inv
    y = xhat * bn.gamma + bn.beta
    return y, dict(xhat=xhat, inv=inv, batch_stats=batch_stats)


def _bn_backward(cache, bn: BatchNormParams, g):
    xhat, inv = cache["xhat"], cache["inv"]
    axes = (0, 1, 2)
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    dxhat = g * bn.gamma
    if cache["batch_stats"]:
        dx = (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes)) * inv
    else:
        dx = dxhat * inv
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# full block


@dataclass
class BlockCache:
    params: AgcnBlockParams
    version: int
    graph: dict
    bn_graph: dict
    relu1_mask: np.ndarray
    drop_mask: np.ndarray | None
    temporal: dict
    bn_temporal: dict
    res_input: np.ndarray | None
    out_mask: np.ndarray | None
    x_shape: tuple


def _residual(x, p: AgcnBlockParams):
    if p.res_w is None:
        return x, None
    xs = x[:, ::p.stride]
    if p.stride != 1:
        xs = np.ascontiguousarray(xs)
    return xs @ p.res_w, xs


def block_forward(x: np.ndarray, stack: AdjacencyStack, params: AgcnBlockParams, mode: Mode = "eval",
                  rng: np.random.Generator | None = None, update_stats: bool | None = None):
    """Channel-last ``(B, T, N, C)`` version of :func:`agcn_block_forward`."""
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_graph_shapes(x, stack, params)
    train = mode == "train"
    if update_stats is None:
        update_stats = train

    g1, gcache = _graph_forward(x, stack, params)
    h1, bn1 = _bn_forward(g1, params.bn_graph, train, update_stats and train)
    mask1 = h1 > 0
    r1 = h1 * mask1
    drop = None
    if train and params.dropout > 0:
        if rng is None:
            raise UsageError("train-mode dropout needs an explicit random generator")
        keep = 1.0 - params.dropout
        drop = (rng.random(r1.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        r1 = r1 * drop
    t1, tcache = _temporal_forward(r1, params.tconv_w, params.tconv_b, params.stride)
    h2, bn2 = _bn_forward(t1, params.bn_temporal, train, update_stats and train)
    res, res_in = _residual(x, params)
    pre = h2 + res
    out_mask = None
    if params.activate:
        out_mask = pre > 0
        pre = pre * out_mask
    cache = BlockCache(params, params.version, gcache, bn1, mask1, drop, tcache, bn2, res_in, out_mask, x.shape)
    return pre, cache


def block_backward(cache: BlockCache | None, grad_out: np.ndarray):
    """Channel-last ``(B, T, N, C)`` version of :func:`agcn_block_backward`."""
    if not isinstance(cache, BlockCache):
        raise UsageError("block backward needs the cache returned by the matching forward call")
    p = cache.params
    if cache.version != p.version:
        raise UsageError("stale cache: block parameters changed since the forward pass")
    g = grad_out
    if cache.out_mask is not None:
        g = g * cache.out_mask
    grads: dict[str, np.ndarray] = {}

    if p.res_w is None:
        dx = g.copy()
    else:
        xs = cache.res_input
        c_in = xs.shape[-1]
        grads["res.weight"] = xs.reshape(-1, c_in).T @ g.reshape(-1, g.shape[-1])
        dx = np.zeros(cache.x_shape, dtype=g.dtype)
        dx[:, ::p.stride] = g @ p.res_w.T

    dt, grads["bn_temporal.gamma"], grads["bn_temporal.beta"] = _bn_backward(cache.bn_temporal, p.bn_temporal, g)
    dr, grads["tconv.weight"], grads["tconv.bias"] = _temporal_backward(cache.temporal, p.tconv_w, p.stride, dt)
    if cache.drop_mask is not None:
        dr = dr * cache.drop_mask
    dr = dr * cache.relu1_mask
    dg, grads["bn_graph.gamma"], grads["bn_graph.beta"] = _bn_backward(cache.bn_graph, p.bn_graph, dr)
    dxg, ggrads = _graph_backward(cache.graph, p, dg)
    grads.update(ggrads)
    dx += dxg
    return dx, grads


def agcn_block_forward(
    x: np.ndarray,
    stack: AdjacencyStack,
    params: AgcnBlockParams,
    mode: Mode = "eval",
    rng: np.random.Generator | None = None,
    update_stats: bool | None = None,
) -> tuple[np.ndarray, BlockCache]:
    """graph conv -> BN -> ReLU -> dropout -> temporal conv -> BN -> (+ residual) -> ReLU.

    Takes and returns ``(B, C, T, N)`` feature maps.  ``mode="train"``
    normalizes with batch statistics and applies dropout; running statistics
    are updated unless ``update_stats=False``.
    """
    _check_graph_shapes(x, stack, params, "BCTN")
    out, cache = block_forward(to_channels_last(x), stack, params, mode, rng, update_stats)
    return to_channels_first(out), cache


def agcn_block_backward(cache: BlockCache | None, grad_out: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of a scalar loss w.r.t. the block input and every named parameter (``(B, C, T, N)`` layout)."""
    if not isinstance(cache, BlockCache):
        raise UsageError("agcn_block_backward needs the cache returned by agcn_block_forward")
    dx, grads = block_backward(cache, to_channels_last(grad_out))
    return to_channels_first(dx), grads
