"""Per-frame convolutional feature pyramid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


@dataclass
class FeaturePyramid:
    """``maps[s]`` has shape ``(B, T, d, H / (k * 2**s), W / (k * 2**s))``."""

    maps: list
    k: int

    @property
    def S(self) -> int:
        return len(self.maps)

    @property
    def d(self) -> int:
        return self.maps[0].shape[2]

    def stride(self, s: int) -> int:
        return self.k * 2 ** s

    def frames(self, start: int, stop: int) -> "FeaturePyramid":
        return FeaturePyramid([m[:, start:stop] for m in self.maps], self.k)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(channels)
        self.norm2 = nn.InstanceNorm2d(channels)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(x + y)


class FeatureNet(nn.Module):
    """Stride-``k`` stem (``log2 k`` stride-2 conv blocks), residual trunk, 1x1 head.

    Scales 2..S are average-pooled from the scale-1 map, so only one trunk is
    learned.  Frames are processed independently.
    """

    def __init__(self, d: int = 64, k: int = 4, S: int = 4, width: int = 64, blocks: int = 2):
        super().__init__()
        n_down = int(round(math.log2(k)))
        if 2 ** n_down != k or k < 1:
            raise ValueError(f"k must be a power of two, got {k}")
        self.d, self.k, self.S = d, k, S
        layers = []
        c_in = 3
        for i in range(n_down):
            c_out = width if i == n_down - 1 else max(width // 2, 16)
            ks = 7 if i == 0 else 3
            layers += [nn.Conv2d(c_in, c_out, ks, stride=2, padding=ks // 2),
                       nn.InstanceNorm2d(c_out), nn.ReLU()]
            c_in = c_out
        if n_down == 0:
            layers += [nn.Conv2d(3, width, 3, padding=1), nn.InstanceNorm2d(width), nn.ReLU()]
        self.stem = nn.Sequential(*layers)
        self.trunk = nn.Sequential(*[ResidualBlock(width) for _ in range(blocks)])
        self.head = nn.Conv2d(width, d, 1)

    def check_dims(self, H: int, W: int) -> None:
        m = self.k * 2 ** (self.S - 1)
        if H % m or W % m:
            raise ShapeError(f"frame size {H}x{W} not divisible by k*2^(S-1) = {m}")

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """``(n, 3, H, W)`` frames in [0, 1] -> ``(n, d, H/k, W/k)``."""
        x = 2.0 * frames - 1.0
        return self.head(self.trunk(self.stem(x)))

    def pyramid(self, video: torch.Tensor) -> FeaturePyramid:
        """``(B, T, 3, H, W)`` or ``(T, 3, H, W)`` video -> FeaturePyramid (batched)."""
        if video.dim() == 4:
            video = video[None]
        if video.dim() != 5 or video.shape[2] != 3:
            raise ShapeError(f"expected (B, T, 3, H, W) video, got {tuple(video.shape)}")
        B, T, _, H, W = video.shape
        self.check_dims(H, W)
        fmap = self(video.reshape(B * T, 3, H, W))
        maps = [fmap]
        for _ in range(1, self.S):
            fmap = F.avg_pool2d(fmap, 2, stride=2)
            maps.append(fmap)
        return FeaturePyramid([m.reshape(B, T, *m.shape[1:]) for m in maps], self.k)


def extract_pyramid(net: FeatureNet, video: torch.Tensor) -> FeaturePyramid:
    return net.pyramid(video)
