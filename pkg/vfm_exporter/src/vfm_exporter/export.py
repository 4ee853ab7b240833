"""Frames -> frozen encoder -> feature files in the engine's format.

One file per sequence: [N, H'/p, W'/p, L * width] float32, written through
foresight's own serializer so consumers see the exact format they already
parse. Files land atomically (temp name in the target directory, then a
rename), and a re-run with the same spec reproduces every byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from foresight.features import FeatureSequence
from foresight.io import save_features

from .encoder import VisionEncoder, build_encoder, encoder_config
from .errors import MissingFramesError, ParameterError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass(frozen=True)
class ExportSpec:
    """What to export: which encoder, which layers, which frames, where to."""

    encoder: str
    layers: tuple[int, ...]
    height: int
    width: int
    sequences: tuple[tuple[str, tuple[str, ...]], ...]
    out_dir: str
    patch_size: int = 14
    checkpoint: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        if not self.layers:
            raise ParameterError("need at least one layer index")
        if self.height < 1 or self.width < 1 or self.patch_size < 1:
            raise ParameterError("height, width, and patch size must be >= 1")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ParameterError(
                f"resolution {self.height}x{self.width} not divisible by "
                f"patch size {self.patch_size}"
            )
        if not self.sequences:
            raise ParameterError("spec lists no sequences")
        for name, frames in self.sequences:
            if not name or os.sep in name or name != name.strip():
                raise ParameterError(f"bad sequence name {name!r}")
            if not frames:
                raise ParameterError(f"sequence {name!r} lists no frames")

    @classmethod
    def from_dict(cls, doc: dict, base_dir) -> "ExportSpec":
        """Build from the JSON document shape; relative paths resolve
        against base_dir, and a string sequence value means a directory of
        image files taken in sorted order."""
        if not isinstance(doc, dict):
            raise ParameterError("spec document must be a JSON object")
        base = Path(base_dir)
        required = ("encoder", "layers", "resolution", "sequences", "out_dir")
        missing = [k for k in required if k not in doc]
        if missing:
            raise ParameterError(f"spec is missing fields: {', '.join(missing)}")
        res = doc["resolution"]
        if not (isinstance(res, (list, tuple)) and len(res) == 2):
            raise ParameterError(f"resolution must be [height, width], got {res!r}")

        def resolve(p: str) -> str:
            q = Path(p)
            return str(q if q.is_absolute() else base / q)

        raw = doc["sequences"]
        if not isinstance(raw, dict):
            raise ParameterError("sequences must map names to frame lists or directories")
        sequences = []
        for name, frames in sorted(raw.items()):
            if isinstance(frames, str):
                frames = _list_frame_dir(resolve(frames))
            elif isinstance(frames, (list, tuple)):
                frames = tuple(resolve(str(f)) for f in frames)
            else:
                raise ParameterError(f"sequence {name!r}: expected a list or a directory")
            sequences.append((str(name), tuple(frames)))

        ckpt = doc.get("checkpoint")
        return cls(
            encoder=str(doc["encoder"]),
            layers=tuple(doc["layers"]),
            height=int(res[0]),
            width=int(res[1]),
            sequences=tuple(sequences),
            out_dir=resolve(str(doc["out_dir"])),
            patch_size=int(doc.get("patch_size", 14)),
            checkpoint=resolve(str(ckpt)) if ckpt else None,
            seed=int(doc.get("seed", 0)),
        )


def _list_frame_dir(path: str) -> tuple[str, ...]:
    d = Path(path)
    if not d.is_dir():
        raise MissingFramesError(f"frame directory does not exist: {d}")
    frames = sorted(
        str(p) for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTS and p.is_file()
    )
    if not frames:
        raise MissingFramesError(f"no image files in {d}")
    return tuple(frames)


def _load_frame(path: str, height: int, width: int) -> torch.Tensor:
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        if rgb.size != (width, height):  # PIL size is (W, H)
            rgb = rgb.resize((width, height), Image.Resampling.BICUBIC)
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(IMAGENET_MEAN, dtype=np.float32)) / np.asarray(
        IMAGENET_STD, dtype=np.float32
    )
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def _encode_sequence(
    encoder: VisionEncoder, frames: tuple[str, ...], spec: ExportSpec
) -> FeatureSequence:
    gh, gw = spec.height // spec.patch_size, spec.width // spec.patch_size
    per_frame = []
    with torch.no_grad():
        for path in frames:
            tiles = encoder.capture(_load_frame(path, spec.height, spec.width), spec.layers)
            stacked = torch.cat(tiles, dim=-1)[0]  # [gh*gw, L*width]
            per_frame.append(stacked.reshape(gh, gw, -1))
    data = torch.stack(per_frame).numpy().astype(np.float32, copy=False)
    meta = {
        "encoder": spec.encoder,
        "layers": list(spec.layers),
        "resolution": [spec.height, spec.width],
        "patch_size": spec.patch_size,
    }
    return FeatureSequence(data, tuple(range(len(frames))), meta)


def export_features(spec: ExportSpec) -> list[Path]:
    """Write one feature file per sequence; returns the final paths."""
    cfg = encoder_config(spec.encoder)
    if cfg.patch_size != spec.patch_size:
        raise ParameterError(
            f"spec patch size {spec.patch_size} != encoder patch size {cfg.patch_size}"
        )
    missing = [
        p for _, frames in spec.sequences for p in frames if not Path(p).is_file()
    ]
    if missing:
        raise MissingFramesError("missing frames: " + ", ".join(missing))

    encoder = build_encoder(spec.encoder, spec.checkpoint, spec.seed)
    encoder.check_layers(spec.layers)
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for name, frames in spec.sequences:
        final = out_dir / f"{name}.feat"
        tmp = out_dir / f"{name}.feat.tmp"
        try:
            save_features(tmp, _encode_sequence(encoder, frames, spec))
            os.replace(tmp, final)
        finally:
            tmp.unlink(missing_ok=True)
        written.append(final)
    return written
