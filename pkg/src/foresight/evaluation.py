"""Downstream metrics and the oracle / copy-last / prediction comparison.

Forecast quality is scored in task space: predicted features go through
frozen linear readout heads (segmentation, depth, surface normals) and the
head outputs are compared against ground truth. The same heads applied to the
true target-frame features give the oracle ceiling; applied to the last
context frame they give the persistence baseline.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, DimensionError, NumericError, ParameterError
from .features import FeatureSequence, PcaModel, pca_decode
from .inference import RolloutSchedule, copy_last, rollout
from .model import ForecasterWeights
from .utils import worker_count

READOUT_TASKS = ("seg", "depth", "normals")
ANGLE_THRESHOLD_DEG = 11.25
DELTA1_THRESHOLD = 1.25


# ---------------------------------------------------------------------------
# metrics


def iou_counts(
    pred: np.ndarray, gt: np.ndarray, class_count: int, ignore_value: int = 255
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class intersection and union pixel counts, skipping ignored pixels."""
    if pred.shape != gt.shape:
        raise DimensionError(f"label shapes differ: {pred.shape} vs {gt.shape}")
    valid = (gt != ignore_value) & (pred != ignore_value)
    p = pred[valid]
    g = gt[valid]
    for name, arr in (("pred", p), ("gt", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= class_count):
            raise DataError(f"{name} labels outside [0, {class_count})")
    inter = np.zeros(class_count, dtype=np.int64)
    union = np.zeros(class_count, dtype=np.int64)
    for c in range(class_count):
        pc = p == c
        gc = g == c
        inter[c] = np.count_nonzero(pc & gc)
        union[c] = np.count_nonzero(pc | gc)
    return inter, union


def miou_from_counts(
    inter: np.ndarray, union: np.ndarray, subset: Optional[Sequence[int]] = None
) -> tuple[float, np.ndarray]:
    """Mean IoU over classes that appear at all; absent classes are NaN."""
    per_class = np.full(len(union), np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    idx = np.asarray(sorted(subset), dtype=np.int64) if subset is not None else np.arange(len(union))
    vals = per_class[idx]
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise ParameterError("no class present in either prediction or ground truth")
    return float(vals.mean()), per_class


def miou(
    pred: np.ndarray,
    gt: np.ndarray,
    class_count: int,
    ignore_value: int = 255,
    subset: Optional[Sequence[int]] = None,
) -> tuple[float, np.ndarray]:
    """Mean intersection-over-union between two label maps.

    Classes absent from both maps are excluded from the mean (NaN in the
    per-class vector), so relabeling an unused class id cannot move the score.
    """
    inter, union = iou_counts(pred, gt, class_count, ignore_value)
    return miou_from_counts(inter, union, subset)


def depth_metrics(
    pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None
) -> tuple[float, float]:
    """(AbsRel, delta1): mean |pred-gt|/gt and the fraction within 1.25x.

    Scale-sensitive on purpose: predicting 1.3x the true depth everywhere
    gives AbsRel 0.3 and delta1 0.
    """
    if pred.shape != gt.shape:
        raise DimensionError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    if valid is None:
        valid = np.ones(gt.shape, dtype=bool)
    p = pred[valid].astype(np.float64)
    g = gt[valid].astype(np.float64)
    if p.size == 0:
        raise ParameterError("no valid depth pixels")
    if np.any(g <= 0) or np.any(p <= 0):
        raise DataError("depth values must be > 0")
    abs_rel = float(np.mean(np.abs(p - g) / g))
    ratio = np.maximum(p / g, g / p)
    delta1 = float(np.mean(ratio < DELTA1_THRESHOLD))
    return abs_rel, delta1


def normal_metrics(
    pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None
) -> tuple[float, float]:
    """(mean angular error in degrees, fraction of pixels under 11.25 degrees)."""
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise DimensionError(
            f"normals must be matching [..., 3] arrays, got {pred.shape} vs {gt.shape}"
        )
    if valid is None:
        valid = np.ones(pred.shape[:-1], dtype=bool)
    p = pred[valid].astype(np.float64)
    g = gt[valid].astype(np.float64)
    if p.size == 0:
        raise ParameterError("no valid normal pixels")
    pn = np.linalg.norm(p, axis=-1)
    gn = np.linalg.norm(g, axis=-1)
    if np.any(pn == 0) or np.any(gn == 0):
        raise DataError("zero-length normal vector")
    cos = np.clip((p * g).sum(axis=-1) / (pn * gn), -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    return float(ang.mean()), float(np.mean(ang < ANGLE_THRESHOLD_DEG))


# ---------------------------------------------------------------------------
# linear readout heads


@dataclass
class ReadoutHead:
    """Frozen ridge-regression readout from feature space to a task.

    weight [out_dim, in_dim], bias [out_dim]. For "seg" the rows are one
    score per class and apply() argmaxes them; for "normals" outputs are
    renormalized to unit length.
    """

    task: str
    weight: np.ndarray
    bias: np.ndarray
    class_count: Optional[int] = None

    def __post_init__(self):
        if self.task not in READOUT_TASKS:
            raise ParameterError(f"unknown task {self.task!r}, expected one of {READOUT_TASKS}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"weight {self.weight.shape} / bias {self.bias.shape} mismatch"
            )
        if self.task == "seg" and self.class_count != self.weight.shape[0]:
            raise ParameterError("seg head needs class_count == weight rows")
        if self.task == "depth" and self.weight.shape[0] != 1:
            raise ParameterError("depth head must have exactly 1 output")
        if self.task == "normals" and self.weight.shape[0] != 3:
            raise ParameterError("normals head must have exactly 3 outputs")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def scores(self, features: np.ndarray) -> np.ndarray:
        if features.shape[-1] != self.in_dim:
            raise DimensionError(
                f"features have {features.shape[-1]} channels, head expects {self.in_dim}"
            )
        return features.astype(np.float64) @ self.weight.T + self.bias

    def apply(self, features: np.ndarray) -> np.ndarray:
        """[..., in_dim] -> labels [...], depth [...], or unit normals [..., 3]."""
        s = self.scores(features)
        if self.task == "seg":
            return np.argmax(s, axis=-1).astype(np.int64)
        if self.task == "depth":
            return s[..., 0]
        norms = np.maximum(np.linalg.norm(s, axis=-1, keepdims=True), 1e-12)
        return s / norms


def fit_readout(
    features: np.ndarray,
    targets: np.ndarray,
    task: str,
    l2_reg: float = 1e-4,
    class_count: Optional[int] = None,
    ignore_value: int = 255,
) -> ReadoutHead:
    """Closed-form ridge fit of one readout head.

    features [M, D]; targets are int labels [M] for "seg" (ignored pixels
    dropped), positive depths [M], or normal vectors [M, 3]. Features and
    targets are centered before solving, so as l2_reg grows predictions
    collapse toward the target mean rather than toward zero.
    """
    if task not in READOUT_TASKS:
        raise ParameterError(f"unknown task {task!r}")
    if l2_reg < 0:
        raise ParameterError(f"l2_reg must be >= 0, got {l2_reg}")
    if features.ndim != 2:
        raise DimensionError(f"features must be [M, D], got {features.shape}")
    if features.shape[0] != targets.shape[0]:
        raise DimensionError(
            f"{features.shape[0]} feature rows vs {targets.shape[0]} targets"
        )

    x = features.astype(np.float64)
    if task == "seg":
        if class_count is None:
            raise ParameterError("seg fit needs class_count")
        labels = targets.astype(np.int64)
        keep = labels != ignore_value
        labels = labels[keep]
        x = x[keep]
        if labels.size == 0:
            raise ParameterError("all pixels ignored")
        if labels.min() < 0 or labels.max() >= class_count:
            raise DataError(f"labels outside [0, {class_count})")
        y = np.zeros((labels.size, class_count))
        y[np.arange(labels.size), labels] = 1.0
    elif task == "depth":
        y = targets.reshape(-1, 1).astype(np.float64)
        if np.any(y <= 0):
            raise DataError("depth targets must be > 0")
    else:
        y = targets.astype(np.float64)
        if y.ndim != 2 or y.shape[1] != 3:
            raise DimensionError(f"normal targets must be [M, 3], got {targets.shape}")

    xm = x.mean(axis=0)
    ym = y.mean(axis=0)
    xc = x - xm
    yc = y - ym
    gram = xc.T @ xc + l2_reg * np.eye(x.shape[1])
    try:
        wt = np.linalg.solve(gram, xc.T @ yc)  # [D, out]
    except np.linalg.LinAlgError as e:
        raise NumericError(f"ridge system is singular: {e}") from None
    bias = ym - xm @ wt
    return ReadoutHead(
        task=task,
        weight=wt.T.copy(),
        bias=bias,
        class_count=class_count if task == "seg" else None,
    )


# ---------------------------------------------------------------------------
# evaluation pipeline


@dataclass
class EvalItem:
    """One evaluation sequence: features plus per-frame dense targets."""

    features: FeatureSequence
    labels: np.ndarray    # [N, H, W] int
    depth: np.ndarray     # [N, H, W] > 0
    normals: np.ndarray   # [N, H, W, 3] unit vectors
    class_count: int
    movable: frozenset[int] = frozenset()
    ignore_value: int = 255
    name: str = ""

    def __post_init__(self):
        n, h, w = self.features.n_frames, *self.features.grid
        if self.labels.shape != (n, h, w):
            raise DimensionError(f"labels shape {self.labels.shape} != {(n, h, w)}")
        if self.depth.shape != (n, h, w):
            raise DimensionError(f"depth shape {self.depth.shape} != {(n, h, w)}")
        if self.normals.shape != (n, h, w, 3):
            raise DimensionError(f"normals shape {self.normals.shape} != {(n, h, w, 3)}")


@dataclass
class MetricReport:
    """Aggregated task metrics for one prediction source."""

    miou_all: Optional[float] = None
    miou_movable: Optional[float] = None
    per_class_iou: Optional[list[Optional[float]]] = None
    abs_rel: Optional[float] = None
    delta1: Optional[float] = None
    mean_angle_deg: Optional[float] = None
    pct_within_11_25: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "miou_all": self.miou_all,
            "miou_movable": self.miou_movable,
            "per_class_iou": self.per_class_iou,
            "abs_rel": self.abs_rel,
            "delta1": self.delta1,
            "mean_angle_deg": self.mean_angle_deg,
            "pct_within_11_25": self.pct_within_11_25,
        }


class _Accumulator:
    """Pixel-weighted running sums for one prediction source."""

    def __init__(self, class_count: int):
        self.inter = np.zeros(class_count, dtype=np.int64)
        self.union = np.zeros(class_count, dtype=np.int64)
        self.absrel_sum = 0.0
        self.delta1_count = 0
        self.depth_pixels = 0
        self.angle_sum = 0.0
        self.angle_ok = 0
        self.normal_pixels = 0

    def add_seg(self, pred, gt, class_count, ignore_value):
        i, u = iou_counts(pred, gt, class_count, ignore_value)
        self.inter += i
        self.union += u

    def add_depth(self, pred, gt):
        p = pred.astype(np.float64).ravel()
        g = gt.astype(np.float64).ravel()
        if np.any(g <= 0):
            raise DataError("depth ground truth must be > 0")
        p = np.maximum(p, 1e-6)  # linear head can dip non-positive
        self.absrel_sum += float(np.sum(np.abs(p - g) / g))
        self.delta1_count += int(np.sum(np.maximum(p / g, g / p) < DELTA1_THRESHOLD))
        self.depth_pixels += g.size

    def add_normals(self, pred, gt):
        p = pred.reshape(-1, 3).astype(np.float64)
        g = gt.reshape(-1, 3).astype(np.float64)
        pn = np.maximum(np.linalg.norm(p, axis=-1), 1e-12)
        gn = np.maximum(np.linalg.norm(g, axis=-1), 1e-12)
        cos = np.clip((p * g).sum(axis=-1) / (pn * gn), -1.0, 1.0)
        ang = np.degrees(np.arccos(cos))
        self.angle_sum += float(ang.sum())
        self.angle_ok += int(np.sum(ang < ANGLE_THRESHOLD_DEG))
        self.normal_pixels += ang.size

    def merge(self, other: "_Accumulator"):
        self.inter += other.inter
        self.union += other.union
        self.absrel_sum += other.absrel_sum
        self.delta1_count += other.delta1_count
        self.depth_pixels += other.depth_pixels
        self.angle_sum += other.angle_sum
        self.angle_ok += other.angle_ok
        self.normal_pixels += other.normal_pixels

    def report(self, movable: frozenset[int], had_seg: bool) -> MetricReport:
        r = MetricReport()
        if had_seg and self.union.sum() > 0:
            r.miou_all, per_class = miou_from_counts(self.inter, self.union)
            r.per_class_iou = [None if np.isnan(v) else float(v) for v in per_class]
            mov = sorted(c for c in movable if 0 <= c < len(self.union))
            if mov and np.any(self.union[mov] > 0):
                r.miou_movable, _ = miou_from_counts(self.inter, self.union, subset=mov)
        if self.depth_pixels:
            r.abs_rel = self.absrel_sum / self.depth_pixels
            r.delta1 = self.delta1_count / self.depth_pixels
        if self.normal_pixels:
            r.mean_angle_deg = self.angle_sum / self.normal_pixels
            r.pct_within_11_25 = self.angle_ok / self.normal_pixels
        return r


def evaluate_pipeline(
    weights: ForecasterWeights,
    corpus: Sequence[EvalItem],
    schedule: RolloutSchedule,
    heads: dict[str, ReadoutHead],
    pca: Optional[PcaModel] = None,
) -> dict[str, MetricReport]:
    """Score oracle, persistence, and model predictions on one schedule.

    For every sequence the schedule's context frames are selected by frame
    id, the model is rolled out to the target frame, and all three feature
    sources go through the same heads. When a PCA codec is given and a head
    expects decoded-width features, predictions are decoded first. Items are
    processed in parallel; accumulation order is fixed.
    """
    if not corpus:
        raise ParameterError("evaluation corpus is empty")
    unknown = set(heads) - set(READOUT_TASKS)
    if unknown:
        raise ParameterError(f"unknown head tasks {sorted(unknown)}")
    if not heads:
        raise ParameterError("need at least one readout head")

    class_count = corpus[0].class_count
    movable = corpus[0].movable

    def maybe_decode(f: FeatureSequence, head: ReadoutHead) -> np.ndarray:
        if head.in_dim == f.channels:
            return f.data
        if pca is not None and head.in_dim == pca.c_in and f.channels == pca.d_out:
            return pca_decode(pca, f).data
        raise DimensionError(
            f"{head.task} head expects {head.in_dim} channels, features have "
            f"{f.channels} and no matching PCA codec was given"
        )

    def one_item(item: EvalItem):
        f = item.features
        try:
            ctx_idx = [f.frame_ids.index(i) for i in schedule.context_ids]
            tgt_idx = f.frame_ids.index(schedule.target_id)
        except ValueError as e:
            raise ParameterError(
                f"sequence {item.name!r} lacks a frame the schedule needs: {e}"
            ) from None
        context = FeatureSequence(
            f.data[ctx_idx].copy(), schedule.context_ids, dict(f.meta)
        )
        sources = {
            "oracle": FeatureSequence(
                f.data[tgt_idx : tgt_idx + 1].copy(), (schedule.target_id,)
            ),
            "copy_last": copy_last(context, 1),
            "prediction": _last_frame(rollout(weights, context, schedule.steps)),
        }
        accs = {k: _Accumulator(class_count) for k in sources}
        gt_labels = item.labels[tgt_idx]
        gt_depth = item.depth[tgt_idx]
        gt_normals = item.normals[tgt_idx]
        for key, feats in sources.items():
            acc = accs[key]
            for task, head in heads.items():
                out = head.apply(maybe_decode(feats, head)[0])
                if task == "seg":
                    acc.add_seg(out, gt_labels, class_count, item.ignore_value)
                elif task == "depth":
                    acc.add_depth(out, gt_depth)
                else:
                    acc.add_normals(out, gt_normals)
        return accs

    n_workers = min(worker_count(), len(corpus))
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            all_accs = list(pool.map(one_item, corpus))
    else:
        all_accs = [one_item(item) for item in corpus]

    totals = {k: _Accumulator(class_count) for k in ("oracle", "copy_last", "prediction")}
    for accs in all_accs:
        for k, acc in accs.items():
            totals[k].merge(acc)
    had_seg = "seg" in heads
    return {k: acc.report(movable, had_seg) for k, acc in totals.items()}


def _last_frame(f: FeatureSequence) -> FeatureSequence:
    return FeatureSequence(f.data[-1:].copy(), f.frame_ids[-1:], dict(f.meta))
