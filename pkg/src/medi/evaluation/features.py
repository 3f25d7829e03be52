"""Frozen feature extractors for distribution distances and probes.

Distances and probes only need a fixed measurable embedding, not a trained
one, so the default extractor is a randomly initialized convolutional net
whose weights are frozen at construction and fully determined by a seed.
Anything satisfying :class:`FeatureExtractor` can be swapped in (e.g. a
pretrained backbone wrapped to the same two methods).
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@runtime_checkable
class FeatureExtractor(Protocol):
    @property
    def dim(self) -> int: ...

    def extract(self, images: torch.Tensor) -> np.ndarray: ...


class ConvFeatureExtractor(nn.Module):
    """Random frozen CNN; features are stage-wise global means, concatenated.

    Input images are (N, C, H, W) floats in [-1, 1]. Each stage applies a
    3x3 convolution and SiLU, records the spatial mean of the activation,
    then halves the resolution. The feature vector concatenates the stage
    means, so its width is the sum of the stage widths.
    """

    def __init__(self, in_channels: int = 3, widths: tuple[int, ...] = (16, 32, 64),
                 seed: int = 0, batch_size: int = 256):
        super().__init__()
        if not widths:
            raise ValueError("need at least one stage width")
        generator = torch.Generator().manual_seed(seed)
        convs = []
        ch = in_channels
        for width in widths:
            conv = nn.Conv2d(ch, width, 3, padding=1)
            fan_in = ch * 9
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=generator)
                    * (2.0 / fan_in) ** 0.5
                )
                conv.bias.zero_()
            convs.append(conv)
            ch = width
        self.convs = nn.ModuleList(convs)
        self.widths = tuple(widths)
        self.batch_size = batch_size
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def dim(self) -> int:
        return sum(self.widths)

    @torch.no_grad()
    def extract(self, images: torch.Tensor) -> np.ndarray:
        if images.ndim != 4:
            raise ValueError("images must be (N, C, H, W)")
        chunks = []
        for start in range(0, images.shape[0], self.batch_size):
            h = images[start:start + self.batch_size]
            stage_means = []
            for conv in self.convs:
                h = F.silu(conv(h))
                stage_means.append(h.mean(dim=(2, 3)))
                if min(h.shape[-2:]) >= 2:
                    h = F.avg_pool2d(h, 2)
            chunks.append(torch.cat(stage_means, dim=1))
        return torch.cat(chunks).numpy().astype(np.float64)


__all__ = ["ConvFeatureExtractor", "FeatureExtractor"]
