"""Shared backbone, FPN and the height-branch input feature."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError

STRIDES = (4, 8, 16, 32)


@dataclass
class BackboneConfig:
    depth: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    width: int = 64
    fpn_channels: int = 256

    def validate(self) -> "BackboneConfig":
        if len(self.depth) != 4 or any(int(d) < 1 for d in self.depth):
            raise ConfigError("depth", f"need four positive block counts, got {self.depth}")
        for name in ("width", "fpn_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be a positive integer")
        return self


class FeaturePyramid(NamedTuple):
    levels: list[torch.Tensor]
    height_feature: torch.Tensor | None

    def features(self) -> list[torch.Tensor]:
        """Levels followed by the height feature, the order GCTI indexes."""
        return list(self.levels) + ([self.height_feature] if self.height_feature is not None else [])


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Backbone(nn.Module):
    """Small residual net; four stages at strides 4/8/16/32, widths w..8w."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        w = cfg.width
        self.stem = nn.Sequential(
            conv3x3(3, w, 2), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
            conv3x3(w, w, 2), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
        )
        widths = [w, 2 * w, 4 * w, 8 * w]
        self.out_channels = widths
        stages = []
        cin = w
        for i, (n, cout) in enumerate(zip(cfg.depth, widths)):
            blocks = [BasicBlock(cin, cout, stride=1 if i == 0 else 2)]
            blocks += [BasicBlock(cout, cout) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input size {h}x{w} must be divisible by 32")
        x = self.stem(x)
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


class FPN(nn.Module):
    """Top-down pathway: 1x1 laterals, nearest upsample-and-add, 3x3 smoothing."""

    def __init__(self, in_channels: list[int], d: int):
        super().__init__()
        self.in_channels = list(in_channels)
        self.lateral = nn.ModuleList(nn.Conv2d(c, d, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(d, d, 3, padding=1) for _ in in_channels)
        for m in [*self.lateral, *self.output]:
            nn.init.kaiming_uniform_(m.weight, a=1)
            nn.init.zeros_(m.bias)

    def forward(self, stages: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(stages) != len(self.lateral):
            raise ShapeError(f"expected {len(self.lateral)} stages, got {len(stages)}")
        for i, (s, c) in enumerate(zip(stages, self.in_channels)):
            if s.shape[1] != c:
                raise ShapeError(f"stage {i} has {s.shape[1]} channels, FPN lateral expects {c}")
        laterals = [conv(s) for conv, s in zip(self.lateral, stages)]
        merged = [laterals[-1]]
        for lat in reversed(laterals[:-1]):
            up = F.interpolate(merged[0], size=lat.shape[-2:], mode="nearest")
            merged.insert(0, lat + up)
        return [conv(m) for conv, m in zip(self.output, merged)]


class HeightFeature(nn.Module):
    """The single 3x3 conv producing F_h from the stride-4 stage."""

    def __init__(self, cin: int, d: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, d, 3, padding=1)
        nn.init.zeros_(self.conv.bias)

    def forward(self, stages: list[torch.Tensor]) -> torch.Tensor:
        if stages[0].shape[1] != self.conv.in_channels:
            raise ShapeError(f"stride-4 stage has {stages[0].shape[1]} channels, expected {self.conv.in_channels}")
        return self.conv(stages[0])
