"""Forgery-intensity estimation head: upsampling decoder, channel-softmax
intensity maps mixed by [CLS]-predicted weights, and blend-weight prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class IntensityPrediction:
    channel_maps: torch.Tensor  # (B, C, H', W'), softmax over C at every pixel
    channel_weights: torch.Tensor  # (B, C)
    combined: torch.Tensor  # (B, H', W')


class IntensityDecoder(nn.Module):
    """Two stride-2 transposed convolutions (kernel 4, padding 1), each followed
    by GroupNorm and GELU. A h x w patch grid becomes 4h x 4w."""

    def __init__(self, d_in: int, width: int | None = None, stages: int = 2):
        super().__init__()
        width = width or d_in
        layers = []
        for i in range(stages):
            layers += [
                nn.ConvTranspose2d(d_in if i == 0 else width, width, kernel_size=4, stride=2, padding=1),
                nn.GroupNorm(1, width),
                nn.GELU(),
            ]
        self.net = nn.Sequential(*layers)

    def forward(self, patches: torch.Tensor, grid: tuple[int, int] | None = None) -> torch.Tensor:
        b, n, d = patches.shape
        if grid is None:
            side = math.isqrt(n)
            if side * side != n:
                raise ValueError(f"{n} patch tokens do not form a square grid; pass grid=(h, w)")
            grid = (side, side)
        h, w = grid
        if h * w != n:
            raise ValueError(f"{n} patch tokens do not fit a {grid} grid")
        x = patches.transpose(1, 2).reshape(b, d, h, w)
        return self.net(x)


class IntensityHead(nn.Module):
    def __init__(self, width: int, d_v: int, channels: int):
        super().__init__()
        if channels < 1:
            raise ValueError("need at least one intensity channel")
        self.to_channels = nn.Conv2d(width, channels, kernel_size=1)
        self.channel_weights = nn.Linear(d_v, channels)

    def forward(self, decoded: torch.Tensor, cls: torch.Tensor) -> IntensityPrediction:
        if not (torch.isfinite(decoded).all() and torch.isfinite(cls).all()):
            raise ValueError("non-finite decoder features")
        maps = self.to_channels(decoded).softmax(dim=1)
        weights = self.channel_weights(cls).softmax(dim=-1)
        combined = torch.einsum("bc,bchw->bhw", weights, maps)
        return IntensityPrediction(maps, weights, combined)


class BlendWeightHead(nn.Module):
    """Linear layer on [CLS] followed by softmax; zero-initialized so training
    starts from the uniform blend."""

    def __init__(self, d_v: int, num_methods: int):
        super().__init__()
        self.fc = nn.Linear(d_v, num_methods)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, cls: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(cls).all():
            raise ValueError("non-finite [CLS] feature")
        return F.softmax(self.fc(cls), dim=-1)

