"""Autoregressive forecasting, rollout schedules, and resolution tricks.

A trained model predicts one step ahead from its fixed-length context window.
Longer horizons come from rolling the window forward on the model's own
output; grids larger than the training grid are handled either by resampling
the position table or by averaging overlapping sliding-window predictions.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError, ParameterError
from .features import FeatureSequence
from .model import ForecasterWeights, _forward_batch, make_full_future_mask
from .utils import worker_count


@dataclass(frozen=True)
class RolloutSchedule:
    """Which frames feed the model and which frame is scored.

    context_ids are source-video frame indices with a constant stride between
    consecutive entries; target_id must be reachable from the last context
    frame in an integer number of strides, and that number is `steps`.
    """

    context_ids: tuple[int, ...]
    target_id: int
    steps: int

    def __post_init__(self):
        ids = tuple(int(i) for i in self.context_ids)
        object.__setattr__(self, "context_ids", ids)
        if len(ids) < 2:
            raise ParameterError("schedule needs at least 2 context frames")
        gaps = {b - a for a, b in zip(ids, ids[1:])}
        if len(gaps) != 1 or min(gaps) < 1:
            raise ParameterError(f"context ids must be evenly spaced, got {ids}")
        stride = gaps.pop()
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.target_id != ids[-1] + self.steps * stride:
            raise ParameterError(
                f"target {self.target_id} is not {self.steps} strides of {stride} "
                f"past the last context frame {ids[-1]}"
            )

    @property
    def stride(self) -> int:
        return self.context_ids[1] - self.context_ids[0]

    @classmethod
    def named(cls, name: str) -> "RolloutSchedule":
        """Presets: short (one step), mid (three), long (six), all stride 3."""
        presets = {
            "short": cls((8, 11, 14, 17), 20, 1),
            "mid": cls((2, 5, 8, 11), 20, 3),
            "long": cls((2, 5, 8, 11), 29, 6),
        }
        if name not in presets:
            raise ParameterError(f"unknown schedule {name!r}, expected one of {sorted(presets)}")
        return presets[name]


def _check_context(w: ForecasterWeights, context: FeatureSequence):
    cfg = w.config
    if context.n_frames != cfg.context_frames:
        raise DimensionError(
            f"context has {context.n_frames} frames, model expects {cfg.context_frames}"
        )
    if context.grid != (cfg.grid_h, cfg.grid_w):
        raise DimensionError(
            f"context grid {context.grid} != model grid {(cfg.grid_h, cfg.grid_w)}; "
            f"run interpolate_positions or use sliding_window_forecast"
        )
    if context.channels != cfg.d_in:
        raise DimensionError(f"context channels {context.channels} != model d_in {cfg.d_in}")


def _next_frame_id(frame_ids: tuple[int, ...]) -> int:
    step = frame_ids[-1] - frame_ids[-2] if len(frame_ids) >= 2 else 1
    return frame_ids[-1] + step


def forecast_next(w: ForecasterWeights, context: FeatureSequence) -> FeatureSequence:
    """Predict the frame one stride past the context. [N_c,H,W,D] -> [1,H,W,D].

    The prediction slots are fully masked, so only the context is visible.
    """
    _check_context(w, context)
    cfg = w.config
    n, s = cfg.seq_frames, cfg.n_cells
    x = np.zeros((1, n, s, cfg.d_in), dtype=context.data.dtype)
    x[0, : cfg.context_frames] = context.data.reshape(cfg.context_frames, s, cfg.d_in)
    mask = make_full_future_mask(cfg).reshape(1, n, s)
    pred, _, _ = _forward_batch(x, mask, w)
    out = pred[0, cfg.context_frames].reshape(1, cfg.grid_h, cfg.grid_w, cfg.d_in)
    return FeatureSequence(out, (_next_frame_id(context.frame_ids),), dict(context.meta))


def rollout(
    w: ForecasterWeights,
    context: FeatureSequence,
    steps: int,
    probe: Optional[Callable[[FeatureSequence], None]] = None,
) -> FeatureSequence:
    """Forecast `steps` frames by feeding each prediction back as context.

    After every internal one-step call the oldest frame is dropped and the
    new prediction appended, so the window length never changes. Returns all
    predicted frames in order; rollout(a) extended by rollout(b) on its own
    output equals rollout(a + b) exactly. `probe`, when given, sees each
    intermediate context (test hook).
    """
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    _check_context(w, context)
    window = context
    preds = []
    ids = []
    for _ in range(steps):
        if probe is not None:
            probe(window)
        nxt = forecast_next(w, window)
        preds.append(nxt.data[0])
        ids.append(nxt.frame_ids[0])
        window = FeatureSequence(
            np.concatenate([window.data[1:], nxt.data], axis=0),
            window.frame_ids[1:] + nxt.frame_ids,
            dict(window.meta),
        )
    return FeatureSequence(np.stack(preds, axis=0), tuple(ids), dict(context.meta))


def copy_last(context: FeatureSequence, steps: int = 1) -> FeatureSequence:
    """Persistence baseline: repeat the last observed frame."""
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    data = np.repeat(context.data[-1:].copy(), steps, axis=0)
    stride = (
        context.frame_ids[-1] - context.frame_ids[-2]
        if len(context.frame_ids) >= 2
        else 1
    )
    ids = tuple(context.frame_ids[-1] + stride * (k + 1) for k in range(steps))
    return FeatureSequence(data, ids, dict(context.meta))


def sliding_window_forecast(
    w: ForecasterWeights,
    context: FeatureSequence,
    crop_h: int,
    crop_w: int,
    stride_h: int,
    stride_w: int,
) -> FeatureSequence:
    """One-step forecast on a grid larger than the model's, by averaging crops.

    Crop size must equal the model grid. Window origins advance by the given
    strides and the final origin on each axis is clamped so every cell is
    covered; overlapping predictions are averaged with uniform weight. Workers
    run windows in parallel but the reduction order is fixed, so the result
    does not depend on FORESIGHT_THREADS.
    """
    cfg = w.config
    if (crop_h, crop_w) != (cfg.grid_h, cfg.grid_w):
        raise ParameterError(
            f"crop {crop_h}x{crop_w} must equal the model grid {cfg.grid_h}x{cfg.grid_w}"
        )
    if stride_h < 1 or stride_w < 1:
        raise ParameterError("strides must be >= 1")
    big_h, big_w = context.grid
    if big_h < crop_h or big_w < crop_w:
        raise ParameterError(
            f"context grid {big_h}x{big_w} smaller than crop {crop_h}x{crop_w}"
        )
    if context.n_frames != cfg.context_frames:
        raise DimensionError(
            f"context has {context.n_frames} frames, model expects {cfg.context_frames}"
        )
    if context.channels != cfg.d_in:
        raise DimensionError(f"context channels {context.channels} != model d_in {cfg.d_in}")

    def origins(big, crop, stride):
        out = list(range(0, big - crop + 1, stride))
        if out[-1] != big - crop:
            out.append(big - crop)
        return out

    ys = origins(big_h, crop_h, stride_h)
    xs = origins(big_w, crop_w, stride_w)
    windows = [(y, x) for y in ys for x in xs]

    def run(origin):
        y, x = origin
        sub = FeatureSequence(
            context.data[:, y : y + crop_h, x : x + crop_w, :].copy(),
            context.frame_ids,
        )
        return forecast_next(w, sub).data[0]

    n_workers = min(worker_count(), len(windows))
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run, windows))
    else:
        results = [run(o) for o in windows]

    acc = np.zeros((big_h, big_w, cfg.d_in), dtype=np.float64)
    cnt = np.zeros((big_h, big_w, 1), dtype=np.float64)
    for (y, x), pred in zip(windows, results):
        acc[y : y + crop_h, x : x + crop_w] += pred
        cnt[y : y + crop_h, x : x + crop_w] += 1.0
    out = (acc / cnt).astype(context.data.dtype)
    return FeatureSequence(
        out[None], (_next_frame_id(context.frame_ids),), dict(context.meta)
    )
