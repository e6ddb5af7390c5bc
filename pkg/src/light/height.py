"""Height branch: pyramid pooling over F_h followed by the sigmoid height head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError


@dataclass
class PpmConfig:
    bin_sizes: list[int] = field(default_factory=lambda: [1, 2, 3, 6])

    def validate(self, spatial: int | None = None) -> "PpmConfig":
        bins = list(self.bin_sizes)
        if not bins or any(b < 1 for b in bins) or any(b >= c for b, c in zip(bins, bins[1:])):
            raise ConfigError("bin_sizes", f"must be positive and strictly increasing, got {bins}")
        if spatial is not None and bins[-1] > spatial:
            raise ConfigError("bin_sizes", f"bin {bins[-1]} exceeds feature size {spatial}")
        return self


class PPM(nn.Module):
    def __init__(self, d: int, cfg: PpmConfig | None = None):
        super().__init__()
        self.cfg = (cfg or PpmConfig()).validate()
        if d % 4:
            raise ConfigError("fpn_channels", f"PPM needs channels divisible by 4, got {d}")
        self.d = d
        self.branches = nn.ModuleList(nn.Conv2d(d, d // 4, 1) for _ in self.cfg.bin_sizes)
        n_cat = d + len(self.cfg.bin_sizes) * (d // 4)
        self.bottleneck = nn.Conv2d(n_cat, d, 3, padding=1)

    def branch_outputs(self, x: torch.Tensor) -> list[torch.Tensor]:
        size = x.shape[-2:]
        self.cfg.validate(min(size))
        outs = []
        for b, conv in zip(self.cfg.bin_sizes, self.branches):
            pooled = F.relu(conv(F.adaptive_avg_pool2d(x, b)))
            outs.append(F.interpolate(pooled, size=size, mode="bilinear", align_corners=False))
        return outs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.d:
            raise ShapeError(f"PPM expects {self.d} channels, got {x.shape[1]}")
        cat = torch.cat([x, *self.branch_outputs(x)], dim=1)
        return F.relu(self.bottleneck(cat))


class HeightHead(nn.Module):
    """``sigmoid(conv(bn(conv(x))))`` at stride 4, upsampled to input size."""

    def __init__(self, d: int, upsample: int = 4):
        super().__init__()
        self.conv1 = nn.Conv2d(d, d // 2, 3, padding=1)
        self.bn = nn.BatchNorm2d(d // 2, momentum=0.1)
        self.conv2 = nn.Conv2d(d // 2, 1, 3, padding=1)
        self.upsample = upsample

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.sigmoid(self.conv2(self.bn(self.conv1(x))))
        if self.upsample != 1:
            h = F.interpolate(h, scale_factor=self.upsample, mode="bilinear", align_corners=False)
        return h[:, 0]


def normalize(height_m, max_height: float):
    if max_height <= 0:
        raise ConfigError("max_height", f"must be > 0, got {max_height}")
    if isinstance(height_m, torch.Tensor):
        return (height_m / max_height).clamp(0, 1)
    # float64 keeps the meters -> [0, 1] -> meters round trip below 1e-6 m
    return np.clip(np.asarray(height_m, dtype=np.float64) / max_height, 0, 1)


def denormalize(height_norm, max_height: float):
    if max_height <= 0:
        raise ConfigError("max_height", f"must be > 0, got {max_height}")
    if isinstance(height_norm, torch.Tensor):
        return height_norm * max_height
    return np.asarray(height_norm, dtype=np.float64) * max_height
