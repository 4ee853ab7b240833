"""ViT encoders with intermediate-layer capture.

The geometry is the load-bearing part: patch tokenization by a strided
convolution, a class token plus a handful of register tokens ahead of the
patch grid, and bicubic resampling of the position table whenever the input
grid differs from the one the table was built for. Blocks are standard
pre-norm attention + MLP with per-channel LayerScale. Weights come from a
saved state dict, or from a seeded init when no checkpoint is given (format
work and tests); inference is always eval-mode and gradient-free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ParameterError


@dataclass(frozen=True)
class EncoderConfig:
    depth: int
    width: int
    n_heads: int
    patch_size: int = 14
    n_registers: int = 4
    mlp_ratio: float = 4.0
    base_grid: int = 16  # position-table edge at the pretraining resolution

    def __post_init__(self):
        for name in ("depth", "width", "n_heads", "patch_size", "base_grid"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.width % self.n_heads != 0:
            raise ParameterError(
                f"width {self.width} not divisible by n_heads {self.n_heads}"
            )
        if self.n_registers < 0:
            raise ParameterError(f"n_registers must be >= 0, got {self.n_registers}")
        if self.mlp_ratio <= 0:
            raise ParameterError(f"mlp_ratio must be > 0, got {self.mlp_ratio}")


REGISTRY = {
    "vits14": EncoderConfig(depth=12, width=384, n_heads=6),
    "vitb14": EncoderConfig(depth=12, width=768, n_heads=12),
    "vitl14": EncoderConfig(depth=24, width=1024, n_heads=16),
}


def encoder_config(encoder_id: str) -> EncoderConfig:
    if encoder_id not in REGISTRY:
        raise ParameterError(
            f"unknown encoder {encoder_id!r}, expected one of {sorted(REGISTRY)}"
        )
    return REGISTRY[encoder_id]


class Block(nn.Module):
    def __init__(self, width: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(width, eps=1e-6)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ls1 = nn.Parameter(torch.ones(width))
        self.norm2 = nn.LayerNorm(width, eps=1e-6)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)
        self.ls2 = nn.Parameter(torch.ones(width))

    def forward(self, x: Tensor) -> Tensor:
        b, length, d = x.shape
        qkv = self.qkv(self.norm1(x))
        q, k, v = (
            qkv.reshape(b, length, 3, self.n_heads, d // self.n_heads)
            .permute(2, 0, 3, 1, 4)
            .unbind(0)
        )
        ctx = F.scaled_dot_product_attention(q, k, v)
        ctx = ctx.transpose(1, 2).reshape(b, length, d)
        x = x + self.ls1 * self.proj(ctx)
        return x + self.ls2 * self.fc2(F.gelu(self.fc1(self.norm2(x))))


class VisionEncoder(nn.Module):
    """Patch-token transformer exposing per-layer features.

    `capture` returns, for each requested block index, the token states after
    that block with the final LayerNorm applied and the class/register tokens
    dropped, shaped [B, grid_h * grid_w, width].
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        w, p = config.width, config.patch_size
        self.patch = nn.Conv2d(3, w, kernel_size=p, stride=p)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, w))
        self.registers = (
            nn.Parameter(torch.zeros(1, config.n_registers, w))
            if config.n_registers
            else None
        )
        # class slot first, then the base_grid x base_grid patch table
        self.pos = nn.Parameter(torch.zeros(1, config.base_grid**2 + 1, w))
        self.blocks = nn.ModuleList(
            Block(w, config.n_heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(w, eps=1e-6)

    def _pos_for(self, gh: int, gw: int) -> tuple[Tensor, Tensor]:
        base, w = self.config.base_grid, self.config.width
        cls_pos = self.pos[:, :1]
        table = self.pos[:, 1:].reshape(1, base, base, w).permute(0, 3, 1, 2)
        if (gh, gw) != (base, base):
            table = F.interpolate(
                table, size=(gh, gw), mode="bicubic", align_corners=False
            )
        return cls_pos, table.permute(0, 2, 3, 1).reshape(1, gh * gw, w)

    def check_layers(self, layers: Sequence[int]) -> None:
        if len(layers) == 0:
            raise ParameterError("need at least one layer index")
        bad = [i for i in layers if not (0 <= int(i) < self.config.depth)]
        if bad:
            raise ParameterError(
                f"layer indices {bad} out of range for depth {self.config.depth}"
            )

    def capture(self, images: Tensor, layers: Sequence[int]) -> list[Tensor]:
        self.check_layers(layers)
        p = self.config.patch_size
        if images.ndim != 4 or images.shape[1] != 3:
            raise ParameterError(f"images must be [B, 3, H, W], got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % p or w % p:
            raise ParameterError(f"resolution {h}x{w} not divisible by patch size {p}")

        x = self.patch(images)
        gh, gw = x.shape[-2:]
        x = x.flatten(2).transpose(1, 2)
        cls_pos, patch_pos = self._pos_for(gh, gw)
        x = x + patch_pos
        b = x.shape[0]
        front = [(self.cls_token + cls_pos).expand(b, -1, -1)]
        if self.registers is not None:
            front.append(self.registers.expand(b, -1, -1))
        x = torch.cat(front + [x], dim=1)

        skip = 1 + self.config.n_registers
        wanted = {int(i) for i in layers}
        deepest = max(wanted)
        out = {}
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in wanted:
                out[i] = self.norm(x)[:, skip:, :]
            if i == deepest:
                break
        return [out[int(i)] for i in layers]


def _seeded_init(module: nn.Module, seed: int) -> None:
    """Overwrite every parameter deterministically; registration order is fixed."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith(("ls1", "ls2")):
                p.fill_(1.0)
            elif ".norm" in name or name.startswith("norm"):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                draw = torch.empty_like(p).normal_(0.0, 0.02, generator=g)
                p.copy_(draw.clamp_(-0.04, 0.04))


def build_encoder(
    encoder_id: str, checkpoint: Optional[str] = None, seed: int = 0
) -> VisionEncoder:
    """Registry encoder, frozen in eval mode.

    With a checkpoint the state dict is loaded strictly; without one the
    weights come from `seed`, so repeated builds are bit-identical.
    """
    enc = VisionEncoder(encoder_config(encoder_id))
    if checkpoint is not None:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        enc.load_state_dict(state)
    else:
        _seeded_init(enc, seed)
    enc.eval()
    enc.requires_grad_(False)
    return enc
