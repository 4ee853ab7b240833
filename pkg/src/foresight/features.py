"""Feature sequences and the PCA used to compress them.

A feature sequence is a dense [N, H, W, C] grid of patch features for N video
frames. Sequences from several encoder layers can be concatenated channel-wise
and reduced to a lower-dimensional space with PCA; forecasting then happens in
that reduced space and predictions are decoded back for the readout heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import DataError, DimensionError, ParameterError

ORTHONORMALITY_TOL = 1e-5


@dataclass
class FeatureSequence:
    """Per-frame feature grids plus the frame indices they came from.

    data        [N, H, W, C] float array
    frame_ids   N source frame indices, strictly increasing
    meta        free-form provenance (encoder name, layer indices, ...)
    """

    data: np.ndarray
    frame_ids: tuple[int, ...]
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.data, np.ndarray) or self.data.ndim != 4:
            raise DimensionError(
                f"feature data must be a 4-d [N, H, W, C] array, got "
                f"{getattr(self.data, 'shape', None)}"
            )
        if min(self.data.shape) < 1:
            raise DimensionError(f"feature dims must all be >= 1, got {self.data.shape}")
        self.frame_ids = tuple(int(i) for i in self.frame_ids)
        if len(self.frame_ids) != self.data.shape[0]:
            raise DimensionError(
                f"{len(self.frame_ids)} frame ids for {self.data.shape[0]} frames"
            )
        if any(b <= a for a, b in zip(self.frame_ids, self.frame_ids[1:])):
            raise DataError(f"frame ids must be strictly increasing, got {self.frame_ids}")
        if not np.isfinite(self.data).all():
            raise DataError("feature data contains NaN or Inf")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def tokens(self) -> np.ndarray:
        """Flatten to [N*H*W, C]."""
        return self.data.reshape(-1, self.data.shape[3])


@dataclass
class PcaModel:
    """Linear codec: encode(x) = (x - mean) @ components.T.

    components rows are orthonormal and ordered by decreasing explained
    variance; each row's largest-magnitude entry is non-negative so a fit is
    reproducible down to the bit.
    """

    mean: np.ndarray                # [c_in]
    components: np.ndarray          # [d_out, c_in]
    explained_variance: np.ndarray  # [d_out], non-increasing, >= 0

    def __post_init__(self):
        if self.components.ndim != 2:
            raise DimensionError(f"components must be 2-d, got {self.components.shape}")
        d_out, c_in = self.components.shape
        if self.mean.shape != (c_in,):
            raise DimensionError(f"mean shape {self.mean.shape} != ({c_in},)")
        if self.explained_variance.shape != (d_out,):
            raise DimensionError(
                f"explained_variance shape {self.explained_variance.shape} != ({d_out},)"
            )
        if np.any(self.explained_variance < 0):
            raise DataError("explained variance must be non-negative")
        if np.any(np.diff(self.explained_variance) > 0):
            raise DataError("explained variance must be non-increasing")
        gram = self.components @ self.components.T
        if not np.allclose(gram, np.eye(d_out), atol=ORTHONORMALITY_TOL):
            raise DataError("components are not orthonormal")

    @property
    def c_in(self) -> int:
        return self.components.shape[1]

    @property
    def d_out(self) -> int:
        return self.components.shape[0]


def concat_layers(layers: Sequence[FeatureSequence]) -> FeatureSequence:
    """Concatenate per-layer sequences channel-wise into one [N, H, W, sum C]."""
    if len(layers) == 0:
        raise ParameterError("concat_layers needs at least one sequence")
    first = layers[0]
    for i, f in enumerate(layers[1:], start=1):
        if f.data.shape[:3] != first.data.shape[:3]:
            raise DimensionError(
                f"layer {i} has frame/grid shape {f.data.shape[:3]}, "
                f"expected {first.data.shape[:3]}"
            )
        if f.frame_ids != first.frame_ids:
            raise DataError(f"layer {i} frame ids differ from layer 0")
    data = np.concatenate([f.data for f in layers], axis=-1)
    meta = dict(first.meta)
    meta["layer_channels"] = [f.channels for f in layers]
    return FeatureSequence(data, first.frame_ids, meta)


def fit_pca(tokens: np.ndarray, d_out: int) -> PcaModel:
    """Fit a PCA basis on [M, c_in] sample tokens.

    Eigendecomposition of the (population) covariance; keeping all c_in
    components makes encode/decode an exact round trip, and the expected
    squared reconstruction error of a d-dimensional code over the fitting
    sample equals the sum of the discarded eigenvalues.
    """
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be [M, c_in], got {tokens.shape}")
    m, c_in = tokens.shape
    if not (1 <= d_out <= c_in):
        raise ParameterError(f"d_out must be in [1, {c_in}], got {d_out}")
    if m < 2:
        raise ParameterError(f"need at least 2 sample tokens, got {m}")
    if not np.isfinite(tokens).all():
        raise DataError("tokens contain NaN or Inf")

    x = tokens.astype(np.float64, copy=False)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / m
    evals, evecs = np.linalg.eigh(cov)  # ascending
    order = np.argsort(evals)[::-1][:d_out]
    evals = np.maximum(evals[order], 0.0)  # rank deficiency shows up as tiny negatives
    components = evecs[:, order].T.copy()

    # Sign convention: largest-|entry| of each component is positive.
    for row in components:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0

    return PcaModel(mean=mean, components=components, explained_variance=evals)


def pca_encode(model: PcaModel, f: FeatureSequence) -> FeatureSequence:
    """Project [N, H, W, c_in] features to [N, H, W, d_out] codes."""
    if f.channels != model.c_in:
        raise DimensionError(f"features have {f.channels} channels, model expects {model.c_in}")
    codes = (f.data.astype(np.float64) - model.mean) @ model.components.T
    return FeatureSequence(codes.astype(f.data.dtype), f.frame_ids, dict(f.meta))


def pca_decode(model: PcaModel, f: FeatureSequence) -> FeatureSequence:
    """Map [N, H, W, d_out] codes back to the original feature space."""
    if f.channels != model.d_out:
        raise DimensionError(f"codes have {f.channels} channels, model produces {model.d_out}")
    recon = f.data.astype(np.float64) @ model.components + model.mean
    return FeatureSequence(recon.astype(f.data.dtype), f.frame_ids, dict(f.meta))
