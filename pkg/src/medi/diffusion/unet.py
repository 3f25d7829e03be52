"""Noise-prediction UNet with joint class/metadata conditioning.

The conditioning vector is summed with the sinusoidal timestep embedding
once per forward pass, and every residual block projects that combined
vector to its own channel width. Architecture knobs (base width, channel
multipliers, blocks per level) scale the same topology from a few hundred
parameters up to the full model.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import ConditioningSpec, EmbeddingTables, combine_with_timestep


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer-style sinusoidal features for integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(groups if channels % groups == 0 else 1, channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, emb_dim: int,
                 groups: int):
        super().__init__()
        self.norm1 = _norm(in_channels, groups)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_channels)
        self.norm2 = _norm(out_channels, groups)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserModel(nn.Module):
    """Predicts the noise component of a diffused image batch."""

    def __init__(self, spec: ConditioningSpec, *, image_size: int = 32,
                 in_channels: int = 3, base_channels: int = 32,
                 channel_mults: tuple[int, ...] = (1, 2),
                 blocks_per_level: int = 1, norm_groups: int = 8):
        super().__init__()
        if image_size % (2 ** len(channel_mults)) != 0:
            raise ValueError(
                f"image size {image_size} must be divisible by "
                f"{2 ** len(channel_mults)} for {len(channel_mults)} levels"
            )
        self.spec = spec
        self.image_size = image_size
        self.in_channels = in_channels
        self.hparams = {
            "image_size": image_size,
            "in_channels": in_channels,
            "base_channels": base_channels,
            "channel_mults": list(channel_mults),
            "blocks_per_level": blocks_per_level,
            "norm_groups": norm_groups,
        }

        d_t = spec.d_t
        self.embeddings = EmbeddingTables(spec)
        self.time_mlp = nn.Sequential(
            nn.Linear(d_t, d_t), nn.SiLU(), nn.Linear(d_t, d_t),
        )

        widths = [base_channels * m for m in channel_mults]
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        ch = widths[0]
        for width in widths:
            level = nn.ModuleList()
            for _ in range(blocks_per_level):
                level.append(ResidualBlock(ch, width, d_t, norm_groups))
                ch = width
            self.down_blocks.append(level)
        self.pool = nn.AvgPool2d(2)

        self.mid1 = ResidualBlock(ch, ch, d_t, norm_groups)
        self.mid2 = ResidualBlock(ch, ch, d_t, norm_groups)

        self.up_blocks = nn.ModuleList()
        for width in reversed(widths):
            level = nn.ModuleList()
            for i in range(blocks_per_level):
                in_ch = ch + width if i == 0 else width
                level.append(ResidualBlock(in_ch, width, d_t, norm_groups))
                ch = width
            self.up_blocks.append(level)

        self.out_norm = _norm(ch, norm_groups)
        self.out_conv = nn.Conv2d(ch, in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor,
                class_ids: torch.Tensor,
                attribute_ids: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"expected {self.image_size}x{self.image_size} input, got "
                f"{tuple(x.shape[-2:])}"
            )
        # Sinusoidal features are computed in float32; follow the parameter
        # dtype so converted models (double, half) keep working.
        z_t = self.time_mlp(
            timestep_embedding(t, self.spec.d_t).to(self.stem.weight.dtype)
        )
        z_cond = self.embeddings(class_ids, attribute_ids)
        emb = combine_with_timestep(z_t, z_cond)

        h = self.stem(x)
        skips = []
        for level in self.down_blocks:
            for block in level:
                h = block(h, emb)
            skips.append(h)
            h = self.pool(h)

        h = self.mid1(h, emb)
        h = self.mid2(h, emb)

        for level in self.up_blocks:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = torch.cat([h, skips.pop()], dim=1)
            for block in level:
                h = block(h, emb)

        return self.out_conv(F.silu(self.out_norm(h)))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


__all__ = ["DenoiserModel", "ResidualBlock", "timestep_embedding"]
