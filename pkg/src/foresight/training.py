"""Masked-feature training: losses, gradients, optimizer, and the train loop.

The objective is the mean per-token regression loss over masked positions
only; unmasked positions contribute exactly nothing, neither to the loss nor
to any gradient. Gradients come from the hand-written reverse pass in
`model`, and `gradient_check` verifies them against central finite
differences in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DimensionError, ParameterError
from .features import FeatureSequence
from .model import (
    ForecasterConfig,
    ForecasterWeights,
    MaskPlan,
    _backward_batch,
    _forward_batch,
    clone_weights,
    forward,
    init_weights,
    interpolate_positions,
    make_full_future_mask,
    named_params,
    set_param,
)

LOSS_VARIANTS = ("smooth_l1", "l1", "mse", "smooth_l1_plus_cos")
_NORM_FLOOR = 1e-12  # cosine term guard; feature vectors are assumed non-degenerate


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 0.1) -> np.ndarray:
    """Huber-style loss summed over the last axis.

    Per element: 0.5*diff^2/beta when |diff| < beta, else |diff| - 0.5*beta.
    Quadratic near zero, linear in the tails, continuous first derivative at
    the seam.
    """
    if beta <= 0:
        raise ParameterError(f"beta must be > 0, got {beta}")
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = np.abs(pred - target)
    elem = np.where(diff < beta, 0.5 * diff * diff / beta, diff - 0.5 * beta)
    return elem.sum(axis=-1)


def make_mask_plan(
    config: ForecasterConfig,
    strategy: str,
    rng: Optional[np.random.Generator] = None,
    ratio: Optional[float] = None,
) -> MaskPlan:
    """Build the boolean mask over [N, H, W].

    "full" masks every position of every non-context frame. "random" masks
    each non-context position independently; with no explicit ratio one is
    drawn uniformly from [0.5, 1.0) per call. Context frames are never
    masked, and an all-empty random draw is redrawn.
    """
    n, nc = config.seq_frames, config.context_frames
    shape = (n, config.grid_h, config.grid_w)
    if strategy == "full":
        return MaskPlan(make_full_future_mask(config), "full", None)
    if strategy != "random":
        raise ParameterError(f"unknown mask strategy {strategy!r}")
    if rng is None:
        raise ParameterError("random masking needs an rng")
    if ratio is not None and not (0.0 < ratio <= 1.0):
        raise ParameterError(f"mask ratio must be in (0, 1], got {ratio}")
    eff = float(rng.uniform(0.5, 1.0)) if ratio is None else ratio
    future = (n - nc, config.grid_h, config.grid_w)
    mask = np.zeros(shape, dtype=bool)
    while True:
        draw = rng.random(future) < eff
        if draw.any():
            break
    mask[nc:] = draw
    return MaskPlan(mask, "random", eff)


# ---------------------------------------------------------------------------
# loss


def _cos_terms(p: np.ndarray, t: np.ndarray):
    pn = np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), _NORM_FLOOR)
    tn = np.maximum(np.linalg.norm(t, axis=-1, keepdims=True), _NORM_FLOOR)
    cos = (p * t).sum(axis=-1, keepdims=True) / (pn * tn)
    return pn, tn, cos


def _masked_loss_grad(
    pred: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray,
    variant: str,
    beta: float,
    cos_weight: float,
):
    """Loss and d(loss)/d(pred) on batched [B, N, S, D] arrays.

    Per sample: mean over its masked tokens of the per-token loss; the batch
    loss is the mean over samples. Gradient is zero at unmasked positions.
    """
    if variant not in LOSS_VARIANTS:
        raise ParameterError(f"unknown loss variant {variant!r}")
    if beta <= 0:
        raise ParameterError(f"beta must be > 0, got {beta}")
    if pred.shape != target.shape:
        raise DimensionError(f"pred shape {pred.shape} != target shape {target.shape}")
    if mask.shape != pred.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} != token shape {pred.shape[:-1]}")

    b = pred.shape[0]
    counts = mask.reshape(b, -1).sum(axis=1)
    if np.any(counts == 0):
        raise ParameterError("every sample needs at least one masked position")
    # weight of each masked token so the total is mean-over-samples of
    # mean-over-that-sample's-masked-tokens
    tok_w = np.zeros(pred.shape[:-1], dtype=np.float64)
    tok_w[mask] = 1.0
    tok_w /= counts.reshape(b, *([1] * (pred.ndim - 2))).astype(np.float64) * b

    p = pred[mask]
    t = target[mask]
    w = tok_w[mask][:, None]
    diff = p - t

    if variant == "mse":
        per_elem = diff * diff
        grad_elem = 2.0 * diff
    elif variant == "l1":
        per_elem = np.abs(diff)
        grad_elem = np.sign(diff)
    else:  # smooth_l1 core
        a = np.abs(diff)
        quad = a < beta
        per_elem = np.where(quad, 0.5 * diff * diff / beta, a - 0.5 * beta)
        grad_elem = np.where(quad, diff / beta, np.sign(diff))

    loss = float((per_elem * w).sum())
    grad_m = grad_elem * w

    if variant == "smooth_l1_plus_cos":
        pn, tn, cos = _cos_terms(p, t)
        loss += cos_weight * float(((1.0 - cos) * w).sum())
        dcos = t / (pn * tn) - cos * p / (pn * pn)
        grad_m = grad_m - cos_weight * dcos * w

    dpred = np.zeros(pred.shape, dtype=np.float64)
    dpred[mask] = grad_m
    return loss, dpred


def mfm_loss(
    pred: FeatureSequence,
    target: FeatureSequence,
    plan: MaskPlan,
    variant: str = "smooth_l1",
    beta: float = 0.1,
    cos_weight: float = 1.0,
) -> float:
    """Masked feature-modeling loss between a prediction and the true sequence."""
    loss, _ = _masked_loss_grad(
        pred.data[None], target.data[None], plan.mask[None],
        variant, beta, cos_weight,
    )
    return loss


def loss_and_grads(
    f: FeatureSequence,
    target: FeatureSequence,
    plan: MaskPlan,
    w: ForecasterWeights,
    variant: str = "smooth_l1",
    beta: float = 0.1,
    cos_weight: float = 1.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Forward, loss, and full reverse pass for one sequence."""
    cfg = w.config
    x = f.data.reshape(1, cfg.seq_frames, cfg.n_cells, cfg.d_in)
    t = target.data.reshape(x.shape)
    mask = plan.mask.reshape(1, cfg.seq_frames, cfg.n_cells)
    return _batch_loss_and_grads(x, t, mask, w, variant, beta, cos_weight)


def _batch_loss_and_grads(x, t, mask, w, variant, beta, cos_weight):
    pred, _, cache = _forward_batch(x, mask, w, want_cache=True)
    loss, dpred = _masked_loss_grad(pred, t, mask, variant, beta, cos_weight)
    grads = _backward_batch(dpred.astype(pred.dtype), w, cache)
    return loss, grads


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_param: str
    eps: float
    tol: float
    per_param: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "max_rel_err": float(self.max_rel_err),
            "worst_param": self.worst_param,
            "eps": float(self.eps),
            "tol": float(self.tol),
            "per_param": {k: float(v) for k, v in self.per_param.items()},
        }


def gradient_check(
    config: ForecasterConfig,
    eps: float = 1e-3,
    tol: float = 1e-4,
    seed: int = 0,
    variant: str = "smooth_l1",
    strategy: str = "full",
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Everything runs in float64 on randomized weights and data. The error for
    each scalar is |analytic - fd| / max(1, |analytic|, |fd|): a true relative
    error when either gradient exceeds 1 and a bound on the absolute error
    below that, so near-zero gradients cannot divide the difference into
    noise. The loss is O(1) by construction, which makes 1 the natural floor.
    """
    if eps <= 0 or tol <= 0:
        raise ParameterError("eps and tol must be > 0")
    rng = np.random.default_rng(seed)
    w = init_weights(config, seed, dtype=np.float64)
    for name, arr in named_params(w):
        base = 1.0 if name.endswith("norm_gain") else 0.0
        set_param(w, name, base + 0.2 * rng.standard_normal(arr.shape))

    shape = (config.seq_frames, config.grid_h, config.grid_w, config.d_in)
    f = FeatureSequence(rng.standard_normal(shape), tuple(range(config.seq_frames)))
    target = FeatureSequence(rng.standard_normal(shape), f.frame_ids)
    plan = make_mask_plan(config, strategy, rng)

    _, analytic = loss_and_grads(f, target, plan, w, variant=variant)

    def loss_at() -> float:
        pred = forward(f, plan, w)[0]
        return mfm_loss(pred, target, plan, variant=variant)

    per_param: dict[str, float] = {}
    worst, worst_name = 0.0, ""
    for name, arr in named_params(w):
        flat = arr.reshape(-1)
        g_flat = analytic[name].reshape(-1)
        p_worst = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = loss_at()
            flat[i] = keep - eps
            down = loss_at()
            flat[i] = keep
            fd = (up - down) / (2.0 * eps)
            a = g_flat[i]
            err = abs(a - fd) / max(1.0, abs(a), abs(fd))
            p_worst = max(p_worst, err)
        per_param[name] = p_worst
        if p_worst > worst:
            worst, worst_name = p_worst, name
    return GradCheckReport(
        passed=worst < tol,
        max_rel_err=worst,
        worst_param=worst_name,
        eps=eps,
        tol=tol,
        per_param=per_param,
    )


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class Phase2Config:
    """High-resolution fine-tuning phase appended after the main run."""

    grid_h: int
    grid_w: int
    total_steps: int
    lr: Optional[float] = None  # None inherits the phase-1 peak rate


@dataclass
class TrainConfig:
    total_steps: int
    batch_size: int
    lr: float = 6.4e-4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    loss: str = "smooth_l1"
    loss_beta: float = 0.1
    cos_weight: float = 1.0
    mask_strategy: str = "full"
    mask_ratio: Optional[float] = None
    frame_stride: int = 1
    grad_clip: Optional[float] = None
    seed: int = 0
    phase2: Optional[Phase2Config] = None

    def __post_init__(self):
        if self.total_steps < 1:
            raise ParameterError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ParameterError("adam betas must be in [0, 1)")
        if self.loss not in LOSS_VARIANTS:
            raise ParameterError(f"unknown loss variant {self.loss!r}")
        if self.mask_strategy not in ("full", "random"):
            raise ParameterError(f"unknown mask strategy {self.mask_strategy!r}")
        if self.frame_stride < 1:
            raise ParameterError(f"frame_stride must be >= 1, got {self.frame_stride}")
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ParameterError("warmup_steps must be in [0, total_steps)")


@dataclass
class OptimizerState:
    """Adam first/second moments, keyed like named_params."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def effective_lr(lr: float, warmup_steps: int, total_steps: int, step: int) -> float:
    """Linear warmup then cosine annealing to exactly zero at total_steps.

    step is 1-based; past the end the rate stays zero.
    """
    if step <= warmup_steps:
        return lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return 0.0
    t = min(step - warmup_steps, span)
    return lr * 0.5 * (1.0 + math.cos(math.pi * t / span))


def adam_step(
    w: ForecasterWeights,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
    step: int,
    lr_override: Optional[float] = None,
    total_override: Optional[int] = None,
) -> tuple[ForecasterWeights, OptimizerState]:
    """One bias-corrected Adam update at the scheduled rate for 1-based step."""
    if step < 1:
        raise ParameterError(f"step is 1-based, got {step}")
    lr_peak = config.lr if lr_override is None else lr_override
    total = config.total_steps if total_override is None else total_override
    lr = effective_lr(lr_peak, config.warmup_steps, total, step)
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step

    if config.grad_clip is not None:
        sq = sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())
        norm = math.sqrt(sq)
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
            grads = {k: g * scale for k, g in grads.items()}

    new_w = clone_weights(w)
    new_state = OptimizerState()
    for name, arr in named_params(new_w):
        g = grads[name].astype(arr.dtype, copy=False)
        if g.shape != arr.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {arr.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (b1 * m + (1.0 - b1) * g) if m is not None else ((1.0 - b1) * g).copy()
        v = (b2 * v + (1.0 - b2) * g * g) if v is not None else ((1.0 - b2) * g * g).copy()
        arr -= (lr / c1) * m / (np.sqrt(v / c2) + config.adam_eps)
        new_state.m[name] = m
        new_state.v[name] = v
    return new_w, new_state


# ---------------------------------------------------------------------------
# training loop


class CurveRow(NamedTuple):
    step: int
    phase: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    weights: ForecasterWeights
    curve: list[CurveRow]

    @property
    def final_loss(self) -> float:
        return self.curve[-1].loss if self.curve else math.nan


def _sample_batch(
    corpus: Sequence[FeatureSequence],
    cfg: ForecasterConfig,
    tc: TrainConfig,
    rng: np.random.Generator,
):
    """Draw windows and masks for one step. One rng draw order, always."""
    n, stride = cfg.seq_frames, tc.frame_stride
    idxs = rng.integers(0, len(corpus), size=tc.batch_size)
    xs = np.empty((tc.batch_size, n, cfg.n_cells, cfg.d_in), dtype=np.float64)
    masks = np.empty((tc.batch_size, n, cfg.n_cells), dtype=bool)
    for j, idx in enumerate(idxs):
        seq = corpus[idx]
        span = (n - 1) * stride
        max_start = seq.n_frames - 1 - span
        if max_start < 0:
            raise ParameterError(
                f"sequence {idx} has {seq.n_frames} frames, window needs {span + 1}"
            )
        start = int(rng.integers(0, max_start + 1))
        window = seq.data[start : start + span + 1 : stride]
        xs[j] = window.reshape(n, cfg.n_cells, cfg.d_in)
        plan = make_mask_plan(cfg, tc.mask_strategy, rng, tc.mask_ratio)
        masks[j] = plan.mask.reshape(n, cfg.n_cells)
    return xs, masks


def _check_corpus(corpus: Sequence[FeatureSequence], cfg: ForecasterConfig, tc: TrainConfig, label: str):
    if not corpus:
        raise ParameterError(f"{label} corpus is empty")
    need = (cfg.seq_frames - 1) * tc.frame_stride + 1
    for i, f in enumerate(corpus):
        if f.grid != (cfg.grid_h, cfg.grid_w) or f.channels != cfg.d_in:
            raise DimensionError(
                f"{label} sequence {i}: shape {f.data.shape[1:]} does not match model "
                f"grid {(cfg.grid_h, cfg.grid_w)} x {cfg.d_in}"
            )
        if f.n_frames < need:
            raise ParameterError(
                f"{label} sequence {i} has {f.n_frames} frames, need >= {need}"
            )


def run_training(
    corpus: Sequence[FeatureSequence],
    config: TrainConfig,
    weights: ForecasterWeights,
    phase2_corpus: Optional[Sequence[FeatureSequence]] = None,
    checkpoint_path: Optional[str] = None,
    checkpoint_every: Optional[int] = None,
    resume_from: Optional[str] = None,
    dtype=np.float32,
) -> TrainResult:
    """Optimize the masked objective; optionally continue at a finer grid.

    Identical corpus, config, and starting weights give bit-identical results.
    Phase 2 (when configured) resizes the spatial position table, resets the
    optimizer and schedule, and keeps training on phase2_corpus. A checkpoint
    written every checkpoint_every steps captures weights, moments, step, and
    rng state; resume_from continues as if the run had never stopped.
    """
    from . import io as fio

    w = weights
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState()
    curve: list[CurveRow] = []
    global_step = 0
    total = config.total_steps + (config.phase2.total_steps if config.phase2 else 0)

    if config.phase2 is not None and phase2_corpus is None:
        raise ParameterError("phase2 configured but no phase2_corpus given")

    if resume_from is not None:
        ck = fio.load_checkpoint(resume_from)
        if ck.opt_state is None or "train_state" not in ck.extra:
            raise ParameterError(f"{resume_from} is not a resumable training checkpoint")
        w = ck.weights
        opt = ck.opt_state
        ts = ck.extra["train_state"]
        global_step = int(ts["global_step"])
        rng.bit_generator.state = ts["rng_state"]
        curve = [CurveRow(*row) for row in ts["curve"]]
    else:
        w = clone_weights(weights)
        for name, arr in named_params(w):
            set_param(w, name, arr.astype(dtype))

    if global_step < config.total_steps:
        _check_corpus(corpus, w.config, config, "train")
    elif config.phase2 is not None and global_step > config.total_steps:
        # resumed inside phase 2; the position table is already resized
        _check_corpus(phase2_corpus, w.config, config, "phase2")

    while global_step < total:
        global_step += 1
        in_phase2 = config.phase2 is not None and global_step > config.total_steps
        if in_phase2 and global_step == config.total_steps + 1:
            p2 = config.phase2
            w = interpolate_positions(w, p2.grid_h, p2.grid_w)
            opt = OptimizerState()
            _check_corpus(phase2_corpus, w.config, config, "phase2")
        if in_phase2:
            p2 = config.phase2
            phase, phase_step = 2, global_step - config.total_steps
            data, lr_peak, phase_total = phase2_corpus, p2.lr, p2.total_steps
        else:
            phase, phase_step = 1, global_step
            data, lr_peak, phase_total = corpus, None, None

        xs, masks = _sample_batch(data, w.config, config, rng)
        xs = xs.astype(dtype)
        loss, grads = _batch_loss_and_grads(
            xs, xs, masks, w, config.loss, config.loss_beta, config.cos_weight
        )
        w, opt = adam_step(
            w, grads, opt, config, phase_step,
            lr_override=lr_peak, total_override=phase_total,
        )
        lr_now = effective_lr(
            config.lr if lr_peak is None else lr_peak,
            config.warmup_steps,
            config.total_steps if phase_total is None else phase_total,
            phase_step,
        )
        curve.append(CurveRow(global_step, phase, lr_now, loss))

        if (
            checkpoint_path is not None
            and checkpoint_every is not None
            and global_step % checkpoint_every == 0
        ):
            fio.save_checkpoint(
                checkpoint_path, w, train_config=config, opt_state=opt,
                extra={
                    "train_state": {
                        "global_step": global_step,
                        "rng_state": rng.bit_generator.state,
                        "curve": [list(r) for r in curve],
                    }
                },
            )

    return TrainResult(weights=w, curve=curve)
