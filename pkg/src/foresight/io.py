"""On-disk formats: feature files, parameter bundles, corpus directories.

Everything is little-endian and fully specified, so files written on one
machine load bit-identically on another. Feature files carry a magic string,
format version, dtype code, dimensions, source frame ids, a JSON metadata
blob, and the raw float32 payload. Checkpoints, PCA codecs, and readout heads
share one named-array bundle container. Malformed input raises FormatError
with the byte offset where parsing failed; nothing partial is ever returned.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .evaluation import EvalItem, ReadoutHead
from .features import FeatureSequence, PcaModel
from .model import (
    ForecasterConfig,
    ForecasterWeights,
    named_params,
    set_param,
    zeros_weights,
)
from .training import OptimizerState, Phase2Config, TrainConfig

FEATURE_MAGIC = b"FFORESGT"
BUNDLE_MAGIC = b"FFORESBN"
FORMAT_VERSION = 1
DTYPE_F32 = 0

MANIFEST_NAME = "manifest.json"
_BUNDLE_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _atomic_write(path: Path, payload: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# feature files


@dataclass
class FeatureFileHeader:
    version: int
    dtype_code: int
    dims: tuple[int, int, int, int]
    frame_ids: tuple[int, ...]
    meta: dict[str, Any]


def save_features(path, f: FeatureSequence):
    """Write one sequence; the payload is float32 regardless of input dtype."""
    path = Path(path)
    with np.errstate(over="ignore"):
        data = np.ascontiguousarray(f.data, dtype="<f4")
    if not np.isfinite(data).all():
        raise DataError("features do not fit float32 (overflow to Inf)")
    try:
        meta_bytes = json.dumps(f.meta, sort_keys=True).encode("utf-8")
    except (TypeError, ValueError) as e:
        raise ParameterError(f"meta is not JSON-serializable: {e}") from None
    n, h, w, c = data.shape
    parts = [
        FEATURE_MAGIC,
        struct.pack("<II", FORMAT_VERSION, DTYPE_F32),
        struct.pack("<4Q", n, h, w, c),
        struct.pack(f"<{n}q", *f.frame_ids),
        struct.pack("<Q", len(meta_bytes)),
        meta_bytes,
        data.tobytes(order="C"),
    ]
    _atomic_write(path, b"".join(parts))


class _Reader:
    """Byte cursor that reports the failing offset."""

    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes, have {len(self.blob) - self.off})",
                offset=self.off,
            )
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_feature_header(r: _Reader) -> FeatureFileHeader:
    magic_off = r.off
    magic = r.take(8, "magic")
    if magic != FEATURE_MAGIC:
        raise FormatError(
            f"{r.path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}", offset=magic_off
        )
    ver_off = r.off
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{r.path}: unsupported format version {version}", offset=ver_off
        )
    dt_off = r.off
    (dtype_code,) = r.unpack("<I", "dtype code")
    if dtype_code != DTYPE_F32:
        raise FormatError(f"{r.path}: unknown dtype code {dtype_code}", offset=dt_off)
    dims_off = r.off
    dims = r.unpack("<4Q", "dims")
    for i, d in enumerate(dims):
        if d == 0:
            raise FormatError(
                f"{r.path}: dimension {i} is zero", offset=dims_off + 8 * i
            )
    n = dims[0]
    ids_off = r.off
    frame_ids = r.unpack(f"<{n}q", "frame ids")
    for i in range(1, n):
        if frame_ids[i] <= frame_ids[i - 1]:
            raise FormatError(
                f"{r.path}: frame ids not strictly increasing at entry {i}",
                offset=ids_off + 8 * i,
            )
    (meta_len,) = r.unpack("<Q", "meta length")
    meta_off = r.off
    meta_bytes = r.take(meta_len, "meta")
    try:
        meta = json.loads(meta_bytes.decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{r.path}: meta is not valid JSON: {e}", offset=meta_off) from None
    if not isinstance(meta, dict):
        raise FormatError(f"{r.path}: meta must be a JSON object", offset=meta_off)
    return FeatureFileHeader(
        version=version, dtype_code=dtype_code, dims=tuple(int(d) for d in dims),
        frame_ids=tuple(int(i) for i in frame_ids), meta=meta,
    )


def inspect_features(path) -> FeatureFileHeader:
    """Header only; the payload is neither read nor validated."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(48)
        if len(head) >= 48:
            n = struct.unpack("<Q", head[16:24])[0]
            head += fh.read(8 * n + 8)  # frame ids + meta length
            if len(head) >= 48 + 8 * n + 8:
                (meta_len,) = struct.unpack("<Q", head[-8:])
                head += fh.read(meta_len)
    return _read_feature_header(_Reader(head, str(path)))


def load_features(path) -> FeatureSequence:
    path = Path(path)
    blob = path.read_bytes()
    r = _Reader(blob, str(path))
    header = _read_feature_header(r)
    n, h, w, c = header.dims
    payload = r.take(n * h * w * c * 4, "payload")
    if r.off != len(blob):
        raise FormatError(
            f"{path}: {len(blob) - r.off} trailing bytes after payload", offset=r.off
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(n, h, w, c).copy()
    if not np.isfinite(data).all():
        raise DataError(f"{path}: payload contains NaN or Inf")
    return FeatureSequence(data, header.frame_ids, header.meta)


# ---------------------------------------------------------------------------
# named-array bundles (checkpoints, PCA codecs, readout heads)


def _save_bundle(path, kind: str, arrays: dict[str, np.ndarray], extra: dict):
    path = Path(path)
    directory = []
    blobs = []
    for name, arr in arrays.items():
        dt = None
        for code, npdt in _BUNDLE_DTYPES.items():
            if arr.dtype == npdt:
                dt = code
                break
        if dt is None:
            # normalize anything else to its closest supported width
            if np.issubdtype(arr.dtype, np.floating):
                dt = "<f8" if arr.dtype.itemsize > 4 else "<f4"
            elif np.issubdtype(arr.dtype, np.integer):
                dt = "<i8"
            else:
                raise ParameterError(f"array {name!r} has unsupported dtype {arr.dtype}")
        a = np.ascontiguousarray(arr, dtype=_BUNDLE_DTYPES[dt])
        directory.append({"name": name, "dtype": dt, "shape": list(a.shape)})
        blobs.append(a.tobytes(order="C"))
    meta = {"kind": kind, "arrays": directory, "extra": extra}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [
        BUNDLE_MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<Q", len(meta_bytes)),
        meta_bytes,
    ] + blobs
    _atomic_write(path, b"".join(parts))


def _load_bundle(path, expect_kind: Optional[str] = None):
    path = Path(path)
    blob = path.read_bytes()
    r = _Reader(blob, str(path))
    magic = r.take(8, "magic")
    if magic != BUNDLE_MAGIC:
        raise FormatError(
            f"{path}: bad magic {magic!r}, expected {BUNDLE_MAGIC!r}", offset=0
        )
    ver_off = r.off
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported bundle version {version}", offset=ver_off)
    (meta_len,) = r.unpack("<Q", "meta length")
    meta_off = r.off
    try:
        meta = json.loads(r.take(meta_len, "meta").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: meta is not valid JSON: {e}", offset=meta_off) from None
    kind = meta.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(
            f"{path}: bundle holds {kind!r}, expected {expect_kind!r}", offset=meta_off
        )
    arrays = {}
    for entry in meta.get("arrays", []):
        dt = _BUNDLE_DTYPES.get(entry.get("dtype"))
        if dt is None:
            raise FormatError(
                f"{path}: array {entry.get('name')!r} has unknown dtype "
                f"{entry.get('dtype')!r}", offset=r.off,
            )
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.take(count * dt.itemsize, f"array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    if r.off != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.off} trailing bytes", offset=r.off)
    return arrays, meta.get("extra", {}), kind


# -- checkpoints


@dataclass
class Checkpoint:
    weights: ForecasterWeights
    train_config: Optional[TrainConfig] = None
    opt_state: Optional[OptimizerState] = None
    extra: dict[str, Any] = field(default_factory=dict)


def _train_config_to_dict(tc: TrainConfig) -> dict:
    d = dataclasses.asdict(tc)
    return d


def _train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    p2 = d.pop("phase2", None)
    known = set(TrainConfig.__dataclass_fields__) - {"phase2"}
    extra = set(d) - known
    if extra:
        raise ParameterError(f"unknown train config fields {sorted(extra)}")
    cfg = TrainConfig(**d, phase2=Phase2Config(**p2) if p2 else None)
    return cfg


def forecaster_config_from_dict(d: dict) -> ForecasterConfig:
    known = set(ForecasterConfig.__dataclass_fields__)
    extra = set(d) - known
    if extra:
        raise ParameterError(f"unknown model config fields {sorted(extra)}")
    return ForecasterConfig(**d)


def save_checkpoint(
    path,
    weights: ForecasterWeights,
    train_config: Optional[TrainConfig] = None,
    opt_state: Optional[OptimizerState] = None,
    extra: Optional[dict] = None,
):
    """Persist weights and, when given, optimizer moments and loop state."""
    arrays = {f"param/{name}": arr for name, arr in named_params(weights)}
    if opt_state is not None:
        for name, arr in opt_state.m.items():
            arrays[f"adam_m/{name}"] = arr
        for name, arr in opt_state.v.items():
            arrays[f"adam_v/{name}"] = arr
    meta = {
        "forecaster_config": dataclasses.asdict(weights.config),
        "train_config": _train_config_to_dict(train_config) if train_config else None,
        "user": extra or {},
    }
    _save_bundle(path, "checkpoint", arrays, meta)


def load_checkpoint(path) -> Checkpoint:
    arrays, meta, _ = _load_bundle(path, expect_kind="checkpoint")
    cfg_dict = meta.get("forecaster_config")
    if not cfg_dict:
        raise FormatError(f"{path}: checkpoint lacks a model config")
    config = forecaster_config_from_dict(cfg_dict)
    w = zeros_weights(config, dtype=np.float32)
    expected = {name for name, _ in named_params(w)}
    got = {k[len("param/"):] for k in arrays if k.startswith("param/")}
    if got != expected:
        missing = sorted(expected - got)[:4]
        surplus = sorted(got - expected)[:4]
        raise FormatError(
            f"{path}: parameter set mismatch (missing {missing}, surplus {surplus})"
        )
    for name, current in named_params(w):
        arr = arrays[f"param/{name}"]
        if arr.shape != current.shape:
            raise FormatError(
                f"{path}: param {name!r} has shape {arr.shape}, expected {current.shape}"
            )
        set_param(w, name, arr)
    opt = None
    m_keys = [k for k in arrays if k.startswith("adam_m/")]
    if m_keys:
        opt = OptimizerState(
            m={k[len("adam_m/"):]: arrays[k] for k in m_keys},
            v={k[len("adam_v/"):]: arrays[k] for k in arrays if k.startswith("adam_v/")},
        )
    tc = meta.get("train_config")
    return Checkpoint(
        weights=w,
        train_config=_train_config_from_dict(tc) if tc else None,
        opt_state=opt,
        extra=meta.get("user", {}),
    )


# -- PCA codecs and readout heads


def save_pca(path, model: PcaModel):
    _save_bundle(
        path, "pca",
        {"mean": model.mean, "components": model.components,
         "explained_variance": model.explained_variance},
        {"c_in": model.c_in, "d_out": model.d_out},
    )


def load_pca(path) -> PcaModel:
    arrays, _, _ = _load_bundle(path, expect_kind="pca")
    try:
        return PcaModel(
            mean=arrays["mean"],
            components=arrays["components"],
            explained_variance=arrays["explained_variance"],
        )
    except KeyError as e:
        raise FormatError(f"{path}: pca bundle is missing array {e}") from None


def save_head(path, head: ReadoutHead):
    _save_bundle(
        path, "readout_head",
        {"weight": head.weight, "bias": head.bias},
        {"task": head.task, "class_count": head.class_count},
    )


def load_head(path) -> ReadoutHead:
    arrays, extra, _ = _load_bundle(path, expect_kind="readout_head")
    try:
        return ReadoutHead(
            task=extra["task"],
            weight=arrays["weight"],
            bias=arrays["bias"],
            class_count=extra.get("class_count"),
        )
    except KeyError as e:
        raise FormatError(f"{path}: head bundle is missing {e}") from None


# ---------------------------------------------------------------------------
# corpus directories


@dataclass
class LoadedCorpus:
    items: list[EvalItem]
    class_count: int
    movable: frozenset[int]
    ignore_value: int
    manifest: dict[str, Any]

    def split(self, which: Optional[str]) -> list[EvalItem]:
        if which is None:
            return list(self.items)
        names = {
            s["name"] for s in self.manifest["sequences"] if s["split"] == which
        }
        return [it for it in self.items if it.name in names]


def _dense_to_file(arr: np.ndarray) -> np.ndarray:
    return arr[..., None] if arr.ndim == 3 else arr


def write_corpus(corpus, out_dir):
    """Lay a generated corpus out as feature/target files plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sequences = []
    for it in corpus.items:
        ids = it.features.frame_ids
        paths = {
            "features": f"{it.name}.feat",
            "labels": f"{it.name}.labels.feat",
            "depth": f"{it.name}.depth.feat",
            "normals": f"{it.name}.normals.feat",
        }
        save_features(out / paths["features"], it.features)
        save_features(
            out / paths["labels"],
            FeatureSequence(_dense_to_file(it.labels.astype(np.float32)), ids),
        )
        save_features(
            out / paths["depth"],
            FeatureSequence(_dense_to_file(it.depth.astype(np.float32)), ids),
        )
        save_features(out / paths["normals"], FeatureSequence(it.normals, ids))
        sequences.append(
            {"name": it.name, "split": it.split,
             "velocity": list(it.velocity), **paths}
        )
    manifest = {
        "version": FORMAT_VERSION,
        "grid": [corpus.spec.grid_h, corpus.spec.grid_w],
        "channels": corpus.spec.channels,
        "class_count": corpus.spec.n_classes,
        "movable_classes": sorted(corpus.movable),
        "ignore_value": 255,
        "scene_spec": corpus.spec.to_dict(),
        "class_depth": corpus.geometry.depth.tolist(),
        "class_normals": corpus.geometry.normals.tolist(),
        "sequences": sequences,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_corpus(corpus_dir, split: Optional[str] = None) -> LoadedCorpus:
    """Read a corpus directory back into evaluation items."""
    root = Path(corpus_dir)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise ParameterError(f"{root} has no {MANIFEST_NAME}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{mpath}: invalid JSON: {e}") from None
    class_count = int(manifest["class_count"])
    movable = frozenset(int(c) for c in manifest.get("movable_classes", []))
    ignore_value = int(manifest.get("ignore_value", 255))
    items = []
    for entry in manifest["sequences"]:
        if split is not None and entry["split"] != split:
            continue
        feats = load_features(root / entry["features"])
        labels_f = load_features(root / entry["labels"]).data[..., 0]
        if not np.all(labels_f == np.round(labels_f)):
            raise DataError(f"{entry['labels']}: labels are not integer-valued")
        depth = load_features(root / entry["depth"]).data[..., 0]
        normals = load_features(root / entry["normals"]).data
        items.append(
            EvalItem(
                features=feats,
                labels=labels_f.astype(np.int32),
                depth=depth,
                normals=normals,
                class_count=class_count,
                movable=movable,
                ignore_value=ignore_value,
                name=entry["name"],
            )
        )
    if not items:
        raise ParameterError(f"{root}: no sequences for split {split!r}")
    return LoadedCorpus(
        items=items, class_count=class_count, movable=movable,
        ignore_value=ignore_value, manifest=manifest,
    )


def load_feature_dir(path, split: Optional[str] = None) -> list[FeatureSequence]:
    """Feature sequences from a corpus dir (manifest-driven) or a loose dir of files."""
    root = Path(path)
    if root.is_file():
        return [load_features(root)]
    if (root / MANIFEST_NAME).is_file():
        return [it.features for it in load_corpus(root, split=split).items]
    files = sorted(root.glob("*.feat"))
    if not files:
        raise ParameterError(f"{root}: no feature files found")
    return [load_features(p) for p in files]


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    model: ForecasterConfig
    train: TrainConfig
    data: dict[str, Any]


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from None
    for key in ("model", "train"):
        if key not in raw:
            raise ParameterError(f"{path}: run config lacks the {key!r} section")
    return RunConfig(
        model=forecaster_config_from_dict(raw["model"]),
        train=_train_config_from_dict(raw["train"]),
        data=raw.get("data", {}),
    )
