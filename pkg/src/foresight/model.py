"""Factorized spatio-temporal masked transformer over feature grids.

Tokens are the H*W cells of N frames. Each block runs attention along the
temporal axis (every cell attends to the same cell in the other frames), then
along the spatial axis (every cell attends within its own frame), then an MLP;
all three are pre-norm residual sublayers. Masked positions are replaced by a
learned MASK token before position embeddings are added, so the input values
at masked positions cannot influence anything downstream.

Forward passes run on plain numpy arrays and optionally record the
intermediates needed by the hand-written reverse pass in `training`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, ParameterError
from .features import FeatureSequence

LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class ForecasterConfig:
    """Static architecture description.

    seq_frames is the total window length N; the first context_frames of it
    are observed and the rest are prediction slots.
    """

    n_layers: int
    d_model: int
    n_heads: int
    d_in: int
    seq_frames: int
    context_frames: int
    grid_h: int
    grid_w: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.n_layers < 0:
            raise ParameterError(f"n_layers must be >= 0, got {self.n_layers}")
        for name in ("d_model", "n_heads", "d_in", "seq_frames", "grid_h", "grid_w"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ParameterError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not (1 <= self.context_frames < self.seq_frames):
            raise ParameterError(
                f"context_frames must be in [1, seq_frames), got "
                f"{self.context_frames} of {self.seq_frames}"
            )
        if self.mlp_ratio <= 0:
            raise ParameterError(f"mlp_ratio must be > 0, got {self.mlp_ratio}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.d_model * self.mlp_ratio)

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class AttentionParams:
    norm_gain: np.ndarray  # [d]
    norm_bias: np.ndarray  # [d]
    wq: np.ndarray         # [d, d]
    bq: np.ndarray         # [d]
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray


@dataclass
class MlpParams:
    norm_gain: np.ndarray
    norm_bias: np.ndarray
    w1: np.ndarray  # [d, hidden]
    b1: np.ndarray  # [hidden]
    w2: np.ndarray  # [hidden, d]
    b2: np.ndarray  # [d]


@dataclass
class LayerParams:
    temporal: AttentionParams
    spatial: AttentionParams
    mlp: MlpParams


@dataclass
class ForecasterWeights:
    config: ForecasterConfig
    input_w: np.ndarray       # [d_in, d_model]
    input_b: np.ndarray       # [d_model]
    mask_token: np.ndarray    # [d_model]
    pos_temporal: np.ndarray  # [seq_frames, d_model]
    pos_spatial: np.ndarray   # [grid_h * grid_w, d_model]
    layers: list[LayerParams]
    output_w: np.ndarray      # [d_model, d_in]
    output_b: np.ndarray      # [d_in]


@dataclass(frozen=True)
class MaskPlan:
    """Boolean [N, H, W] mask; True marks positions replaced by the MASK token."""

    mask: np.ndarray
    strategy: str = "full"
    ratio: Optional[float] = None

    def __post_init__(self):
        if self.mask.ndim != 3 or self.mask.dtype != np.bool_:
            raise DimensionError(
                f"mask must be a boolean [N, H, W] array, got "
                f"{self.mask.dtype} {self.mask.shape}"
            )
        if not self.mask.any():
            raise ParameterError("mask plan must mark at least one position")
        if self.strategy not in ("full", "random"):
            raise ParameterError(f"unknown mask strategy {self.strategy!r}")


def make_full_future_mask(config: ForecasterConfig) -> np.ndarray:
    """Boolean [N, H, W]: True at every position of every non-context frame."""
    mask = np.zeros((config.seq_frames, config.grid_h, config.grid_w), dtype=bool)
    mask[config.context_frames :] = True
    return mask


# ---------------------------------------------------------------------------
# initialization and parameter bookkeeping


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # normal clipped at two standard deviations
    return np.clip(rng.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std)


def zeros_weights(config: ForecasterConfig, dtype=np.float32) -> ForecasterWeights:
    """All-zero parameter tensors (checkpoint loading scaffold)."""
    d, hid = config.d_model, config.mlp_hidden

    def attn():
        return AttentionParams(
            norm_gain=np.zeros(d, dtype), norm_bias=np.zeros(d, dtype),
            wq=np.zeros((d, d), dtype), bq=np.zeros(d, dtype),
            wk=np.zeros((d, d), dtype), bk=np.zeros(d, dtype),
            wv=np.zeros((d, d), dtype), bv=np.zeros(d, dtype),
            wo=np.zeros((d, d), dtype), bo=np.zeros(d, dtype),
        )

    layers = [
        LayerParams(
            temporal=attn(), spatial=attn(),
            mlp=MlpParams(
                norm_gain=np.zeros(d, dtype), norm_bias=np.zeros(d, dtype),
                w1=np.zeros((d, hid), dtype), b1=np.zeros(hid, dtype),
                w2=np.zeros((hid, d), dtype), b2=np.zeros(d, dtype),
            ),
        )
        for _ in range(config.n_layers)
    ]
    return ForecasterWeights(
        config=config,
        input_w=np.zeros((config.d_in, d), dtype), input_b=np.zeros(d, dtype),
        mask_token=np.zeros(d, dtype),
        pos_temporal=np.zeros((config.seq_frames, d), dtype),
        pos_spatial=np.zeros((config.n_cells, d), dtype),
        layers=layers,
        output_w=np.zeros((d, config.d_in), dtype), output_b=np.zeros(config.d_in, dtype),
    )


def init_weights(
    config: ForecasterConfig, seed: int, dtype=np.float32
) -> ForecasterWeights:
    """Fresh weights: projections ~ truncated normal (std 0.02), norm gains one,
    biases, MASK token and both position tables zero."""
    rng = np.random.default_rng(seed)
    d, h = config.d_model, config.mlp_hidden

    def proj(shape):
        return _trunc_normal(rng, shape, INIT_STD).astype(dtype)

    def zeros(shape):
        return np.zeros(shape, dtype=dtype)

    def ones(shape):
        return np.ones(shape, dtype=dtype)

    def attn():
        return AttentionParams(
            norm_gain=ones(d), norm_bias=zeros(d),
            wq=proj((d, d)), bq=zeros(d),
            wk=proj((d, d)), bk=zeros(d),
            wv=proj((d, d)), bv=zeros(d),
            wo=proj((d, d)), bo=zeros(d),
        )

    layers = [
        LayerParams(
            temporal=attn(),
            spatial=attn(),
            mlp=MlpParams(
                norm_gain=ones(d), norm_bias=zeros(d),
                w1=proj((d, h)), b1=zeros(h),
                w2=proj((h, d)), b2=zeros(d),
            ),
        )
        for _ in range(config.n_layers)
    ]
    return ForecasterWeights(
        config=config,
        input_w=proj((config.d_in, d)),
        input_b=zeros(d),
        mask_token=zeros(d),
        pos_temporal=zeros((config.seq_frames, d)),
        pos_spatial=zeros((config.n_cells, d)),
        layers=layers,
        output_w=proj((d, config.d_in)),
        output_b=zeros(config.d_in),
    )


_ATTN_FIELDS = ("norm_gain", "norm_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
_MLP_FIELDS = ("norm_gain", "norm_bias", "w1", "b1", "w2", "b2")


def named_params(w: ForecasterWeights) -> Iterator[tuple[str, np.ndarray]]:
    """Deterministic (name, array) walk over every trainable tensor."""
    yield "input_proj.weight", w.input_w
    yield "input_proj.bias", w.input_b
    yield "mask_token", w.mask_token
    yield "pos_temporal", w.pos_temporal
    yield "pos_spatial", w.pos_spatial
    for i, layer in enumerate(w.layers):
        for f in _ATTN_FIELDS:
            yield f"layers.{i}.temporal.{f}", getattr(layer.temporal, f)
        for f in _ATTN_FIELDS:
            yield f"layers.{i}.spatial.{f}", getattr(layer.spatial, f)
        for f in _MLP_FIELDS:
            yield f"layers.{i}.mlp.{f}", getattr(layer.mlp, f)
    yield "output_proj.weight", w.output_w
    yield "output_proj.bias", w.output_b


def set_param(w: ForecasterWeights, name: str, value: np.ndarray) -> None:
    """Replace one tensor in place by its named_params name."""
    parts = name.split(".")
    if parts[0] == "input_proj":
        setattr(w, {"weight": "input_w", "bias": "input_b"}[parts[1]], value)
    elif parts[0] == "output_proj":
        setattr(w, {"weight": "output_w", "bias": "output_b"}[parts[1]], value)
    elif parts[0] in ("mask_token", "pos_temporal", "pos_spatial"):
        setattr(w, parts[0], value)
    elif parts[0] == "layers":
        sub = getattr(w.layers[int(parts[1])], parts[2])
        setattr(sub, parts[3], value)
    else:
        raise ParameterError(f"unknown parameter {name!r}")


def map_params(w: ForecasterWeights, fn) -> ForecasterWeights:
    """Functional copy with fn applied to every tensor."""
    out = clone_weights(w)
    for name, arr in named_params(out):
        set_param(out, name, fn(name, arr))
    return out


def clone_weights(w: ForecasterWeights) -> ForecasterWeights:
    layers = [
        LayerParams(
            temporal=replace(l.temporal, **{f: getattr(l.temporal, f).copy() for f in _ATTN_FIELDS}),
            spatial=replace(l.spatial, **{f: getattr(l.spatial, f).copy() for f in _ATTN_FIELDS}),
            mlp=replace(l.mlp, **{f: getattr(l.mlp, f).copy() for f in _MLP_FIELDS}),
        )
        for l in w.layers
    ]
    return ForecasterWeights(
        config=w.config,
        input_w=w.input_w.copy(), input_b=w.input_b.copy(),
        mask_token=w.mask_token.copy(),
        pos_temporal=w.pos_temporal.copy(), pos_spatial=w.pos_spatial.copy(),
        layers=layers,
        output_w=w.output_w.copy(), output_b=w.output_b.copy(),
    )


def count_parameters(config: ForecasterConfig) -> int:
    """Trainable scalar count, computed from the config without materializing."""
    d, din, hid = config.d_model, config.d_in, config.mlp_hidden
    attn = 2 * d + 4 * (d * d + d)
    mlp = 2 * d + d * hid + hid + hid * d + d
    per_layer = 2 * attn + mlp
    embed = din * d + d + d + config.seq_frames * d + config.n_cells * d
    out = d * din + din
    return embed + config.n_layers * per_layer + out


# ---------------------------------------------------------------------------
# sublayer forward/backward primitives
#
# Every _fwd returns (output, cache); the matching _bwd consumes the cache and
# the output cotangent. Attention works on a canonical [groups, length, d]
# layout; the temporal/spatial wrappers just reshape into it.


def _ln_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _ln_bwd(dy: np.ndarray, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    dyf = dy.reshape(-1, d)
    dgain = (dyf * xhat.reshape(-1, d)).sum(axis=0)
    dbias = dyf.sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return _ln_fwd(x, gain, bias)[0]


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def _attn_fwd(x: np.ndarray, p: AttentionParams, n_heads: int):
    """Pre-norm residual multi-head self-attention over axis 1 of [G, L, d]."""
    g, l, d = x.shape
    e = d // n_heads
    scale = 1.0 / math.sqrt(e)

    u, ln_cache = _ln_fwd(x, p.norm_gain, p.norm_bias)
    uf = u.reshape(g * l, d)
    q = (uf @ p.wq + p.bq).reshape(g, l, n_heads, e)
    k = (uf @ p.wk + p.bk).reshape(g, l, n_heads, e)
    v = (uf @ p.wv + p.bv).reshape(g, l, n_heads, e)

    scores = np.einsum("glhe,gmhe->ghlm", q, k) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    a = np.exp(scores)
    a /= a.sum(axis=-1, keepdims=True)

    ctx = np.einsum("ghlm,gmhe->glhe", a, v).reshape(g * l, d)
    y = x + (ctx @ p.wo + p.bo).reshape(g, l, d)
    return y, (p, n_heads, scale, ln_cache, uf, q, k, v, a, ctx)


def _attn_bwd(dy: np.ndarray, cache):
    p, n_heads, scale, ln_cache, uf, q, k, v, a, ctx = cache
    g, l, d = dy.shape
    dyf = dy.reshape(g * l, d)

    grads = {"wo": ctx.T @ dyf, "bo": dyf.sum(axis=0)}
    dctx = (dyf @ p.wo.T).reshape(g, l, n_heads, -1)

    da = np.einsum("glhe,gmhe->ghlm", dctx, v)
    dv = np.einsum("ghlm,glhe->gmhe", a, dctx)
    ds = a * (da - (a * da).sum(axis=-1, keepdims=True))
    ds *= scale
    dq = np.einsum("ghlm,gmhe->glhe", ds, k)
    dk = np.einsum("ghlm,glhe->gmhe", ds, q)

    dqf, dkf, dvf = (t.reshape(g * l, d) for t in (dq, dk, dv))
    grads["wq"], grads["bq"] = uf.T @ dqf, dqf.sum(axis=0)
    grads["wk"], grads["bk"] = uf.T @ dkf, dkf.sum(axis=0)
    grads["wv"], grads["bv"] = uf.T @ dvf, dvf.sum(axis=0)

    du = (dqf @ p.wq.T + dkf @ p.wk.T + dvf @ p.wv.T).reshape(g, l, d)
    dx_ln, grads["norm_gain"], grads["norm_bias"] = _ln_bwd(du, ln_cache)
    return dy + dx_ln, grads


def _mlp_fwd(x: np.ndarray, p: MlpParams):
    """Pre-norm residual two-layer MLP with exact GELU, on [..., d]."""
    shape = x.shape
    u, ln_cache = _ln_fwd(x, p.norm_gain, p.norm_bias)
    uf = u.reshape(-1, shape[-1])
    z = uf @ p.w1 + p.b1
    gz = gelu(z)
    y = x + (gz @ p.w2 + p.b2).reshape(shape)
    return y, (p, ln_cache, uf, z, gz, shape)


def _mlp_bwd(dy: np.ndarray, cache):
    p, ln_cache, uf, z, gz, shape = cache
    dyf = dy.reshape(-1, shape[-1])
    grads = {"w2": gz.T @ dyf, "b2": dyf.sum(axis=0)}
    dz = (dyf @ p.w2.T) * _gelu_grad(z)
    grads["w1"], grads["b1"] = uf.T @ dz, dz.sum(axis=0)
    du = (dz @ p.w1.T).reshape(shape)
    dx_ln, grads["norm_gain"], grads["norm_bias"] = _ln_bwd(du, ln_cache)
    return dy + dx_ln, grads


# ---------------------------------------------------------------------------
# public single-axis attention ops


def temporal_attention(tokens: np.ndarray, p: AttentionParams, n_heads: int) -> np.ndarray:
    """Attend across frames independently at every spatial cell. [N,H,W,d] -> same."""
    n, h, w, d = _check_tokens(tokens, p, n_heads)
    x = tokens.reshape(n, h * w, d).transpose(1, 0, 2)  # [S, N, d]
    y, _ = _attn_fwd(x, p, n_heads)
    return y.transpose(1, 0, 2).reshape(n, h, w, d)


def spatial_attention(tokens: np.ndarray, p: AttentionParams, n_heads: int) -> np.ndarray:
    """Attend across the H*W cells independently in every frame. [N,H,W,d] -> same."""
    n, h, w, d = _check_tokens(tokens, p, n_heads)
    x = tokens.reshape(n, h * w, d)  # [N, S, d]
    y, _ = _attn_fwd(x, p, n_heads)
    return y.reshape(n, h, w, d)


def _check_tokens(tokens: np.ndarray, p: AttentionParams, n_heads: int):
    if tokens.ndim != 4:
        raise DimensionError(f"tokens must be [N, H, W, d], got {tokens.shape}")
    n, h, w, d = tokens.shape
    if p.wq.shape != (d, d):
        raise DimensionError(f"weights are for d={p.wq.shape[0]}, tokens have d={d}")
    if d % n_heads != 0:
        raise ParameterError(f"d={d} not divisible by n_heads={n_heads}")
    return n, h, w, d


# ---------------------------------------------------------------------------
# full forward


def _embed_fwd(x: np.ndarray, mask: np.ndarray, w: ForecasterWeights):
    """x [B, N, S, d_in], mask [B, N, S] -> [B, N, S, d_model]."""
    e = x @ w.input_w + w.input_b
    e[mask] = w.mask_token
    h = e + w.pos_temporal[None, :, None, :] + w.pos_spatial[None, None, :, :]
    return h, (x, mask, w)


def _embed_bwd(dh: np.ndarray, cache):
    x, mask, w = cache
    grads = {
        "pos_temporal": dh.sum(axis=(0, 2)),
        "pos_spatial": dh.sum(axis=(0, 1)),
        "mask_token": dh[mask].sum(axis=0),
    }
    keep = ~mask
    xk = x[keep]          # [n_unmasked, d_in]
    dek = dh[keep]        # [n_unmasked, d_model]
    grads["input_proj.weight"] = xk.T @ dek
    grads["input_proj.bias"] = dek.sum(axis=0)
    return grads


def _forward_batch(
    x: np.ndarray,
    mask: np.ndarray,
    w: ForecasterWeights,
    taps: Optional[Sequence[int]] = None,
    want_cache: bool = False,
):
    """Core forward on [B, N, S, d_in] arrays.

    Returns (pred [B, N, S, d_in], tapped {layer: [B, N, S, d_model]}, cache).
    """
    cfg = w.config
    b, n, s, _ = x.shape
    tap_set = set(taps or ())
    bad = [t for t in tap_set if not (1 <= t <= cfg.n_layers)]
    if bad:
        raise ParameterError(f"tap indices {sorted(bad)} outside [1, {cfg.n_layers}]")

    h, embed_cache = _embed_fwd(x, mask, w)
    tapped: dict[int, np.ndarray] = {}
    layer_caches = []
    for i, layer in enumerate(w.layers, start=1):
        ht = h.transpose(0, 2, 1, 3).reshape(b * s, n, cfg.d_model)
        yt, c_t = _attn_fwd(ht, layer.temporal, cfg.n_heads)
        h = yt.reshape(b, s, n, cfg.d_model).transpose(0, 2, 1, 3)

        hs = h.reshape(b * n, s, cfg.d_model)
        ys, c_s = _attn_fwd(hs, layer.spatial, cfg.n_heads)
        h = ys.reshape(b, n, s, cfg.d_model)

        h, c_m = _mlp_fwd(h, layer.mlp)
        if want_cache:
            layer_caches.append((c_t, c_s, c_m))
        if i in tap_set:
            tapped[i] = h.copy()

    pred = h @ w.output_w + w.output_b
    cache = (embed_cache, layer_caches, h, (b, n, s)) if want_cache else None
    return pred, tapped, cache


def _backward_batch(dpred: np.ndarray, w: ForecasterWeights, cache) -> dict[str, np.ndarray]:
    """Reverse pass matching _forward_batch; returns grads keyed like named_params."""
    cfg = w.config
    embed_cache, layer_caches, h_final, (b, n, s) = cache
    grads: dict[str, np.ndarray] = {}

    dpf = dpred.reshape(-1, cfg.d_in)
    grads["output_proj.weight"] = h_final.reshape(-1, cfg.d_model).T @ dpf
    grads["output_proj.bias"] = dpf.sum(axis=0)
    dh = dpred @ w.output_w.T

    for i in range(cfg.n_layers, 0, -1):
        c_t, c_s, c_m = layer_caches[i - 1]
        dh, g_m = _mlp_bwd(dh, c_m)
        for f, v in g_m.items():
            grads[f"layers.{i - 1}.mlp.{f}"] = v

        dhs = dh.reshape(b * n, s, cfg.d_model)
        dhs, g_s = _attn_bwd(dhs, c_s)
        dh = dhs.reshape(b, n, s, cfg.d_model)
        for f, v in g_s.items():
            grads[f"layers.{i - 1}.spatial.{f}"] = v

        dht = dh.transpose(0, 2, 1, 3).reshape(b * s, n, cfg.d_model)
        dht, g_t = _attn_bwd(dht, c_t)
        dh = dht.reshape(b, s, n, cfg.d_model).transpose(0, 2, 1, 3)
        for f, v in g_t.items():
            grads[f"layers.{i - 1}.temporal.{f}"] = v
        layer_caches[i - 1] = None  # free as we go

    grads.update(_embed_bwd(dh, embed_cache))
    return grads


def _validate_forward_args(f: FeatureSequence, plan: MaskPlan, w: ForecasterWeights):
    cfg = w.config
    n, h, wd = f.n_frames, *f.grid
    if (n, h, wd) != (cfg.seq_frames, cfg.grid_h, cfg.grid_w):
        raise DimensionError(
            f"input frames/grid {(n, h, wd)} != model "
            f"{(cfg.seq_frames, cfg.grid_h, cfg.grid_w)}; for a different grid, "
            f"run interpolate_positions or use sliding-window inference"
        )
    if f.channels != cfg.d_in:
        raise DimensionError(f"input channels {f.channels} != model d_in {cfg.d_in}")
    if plan.mask.shape != (n, h, wd):
        raise DimensionError(
            f"mask shape {plan.mask.shape} != input frames/grid {(n, h, wd)}"
        )


def forward(
    f: FeatureSequence,
    plan: MaskPlan,
    w: ForecasterWeights,
    taps: Optional[Sequence[int]] = None,
) -> tuple[FeatureSequence, dict[int, np.ndarray]]:
    """Predict features at every position; masked inputs are invisible.

    Returns the [N, H, W, d_in] prediction plus, for each requested 1-based
    layer index, that block's output activations as [N, H, W, d_model].
    """
    _validate_forward_args(f, plan, w)
    cfg = w.config
    n, gh, gw = f.n_frames, *f.grid
    x = f.data.reshape(1, n, gh * gw, cfg.d_in)
    mask = plan.mask.reshape(1, n, gh * gw)
    pred, tapped, _ = _forward_batch(x, mask, w, taps=taps)
    out = FeatureSequence(
        pred.reshape(n, gh, gw, cfg.d_in), f.frame_ids, dict(f.meta)
    )
    return out, {k: v.reshape(n, gh, gw, cfg.d_model) for k, v in tapped.items()}


# ---------------------------------------------------------------------------
# position-table resampling


def _bilinear_resize_grid(table: np.ndarray, old_hw, new_hw) -> np.ndarray:
    """Corner-aligned bilinear resize of a [H*W, d] table to [H'*W', d]."""
    (oh, ow), (nh, nw) = old_hw, new_hw
    grid = table.reshape(oh, ow, -1)

    def axis_coords(n_new, n_old):
        if n_new == 1 or n_old == 1:
            return np.zeros(n_new), np.zeros(n_new, dtype=np.int64)
        src = np.arange(n_new) * ((n_old - 1) / (n_new - 1))
        lo = np.minimum(np.floor(src).astype(np.int64), n_old - 2)
        return src - lo, lo

    fy, y0 = axis_coords(nh, oh)
    fx, x0 = axis_coords(nw, ow)
    y1 = np.minimum(y0 + 1, oh - 1)
    x1 = np.minimum(x0 + 1, ow - 1)

    fy = fy[:, None, None]
    fx = fx[None, :, None]
    out = (
        grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + grid[np.ix_(y0, x1)] * (1 - fy) * fx
        + grid[np.ix_(y1, x0)] * fy * (1 - fx)
        + grid[np.ix_(y1, x1)] * fy * fx
    )
    return out.reshape(nh * nw, table.shape[-1]).astype(table.dtype)


def interpolate_positions(
    w: ForecasterWeights, new_h: int, new_w: int
) -> ForecasterWeights:
    """Adapt a model to a new grid by resizing its spatial position table.

    The temporal table and every other tensor are copied unchanged; an
    unchanged grid returns a plain copy.
    """
    if new_h < 1 or new_w < 1:
        raise ParameterError(f"grid must be >= 1x1, got {new_h}x{new_w}")
    cfg = w.config
    out = clone_weights(w)
    if (new_h, new_w) == (cfg.grid_h, cfg.grid_w):
        return out
    out.pos_spatial = _bilinear_resize_grid(
        w.pos_spatial, (cfg.grid_h, cfg.grid_w), (new_h, new_w)
    )
    out.config = replace(cfg, grid_h=new_h, grid_w=new_w)
    return out
