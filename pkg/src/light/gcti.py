"""Gated Cross Task Interaction.

Every feature of the pyramid (the FPN levels plus the height feature) can act
as a target. For a target ``t`` the remaining features are sources: they are
resized to the target resolution, encoded into gate features and sigmoid gate
maps, summed under their gates, blended with the target under the target's own
gate and finally passed through a residual conv.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError


@dataclass
class GctiConfig:
    kernel_size: int = 3
    share_gate_params: bool = False
    # indices into [F_1..F_l, F_h]; None means every feature is a target
    targets: list[int] | None = None
    zero_init_output: bool = True

    def validate(self) -> "GctiConfig":
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size", f"must be a positive odd integer, got {self.kernel_size}")
        return self


def align_source(source: torch.Tensor, target_shape: Sequence[int]) -> torch.Tensor:
    """Bilinear resize (half-pixel centers) of ``source`` to ``target_shape`` (H, W)."""
    target_shape = tuple(int(s) for s in target_shape)
    if tuple(source.shape[-2:]) == target_shape:
        return source
    return F.interpolate(source, size=target_shape, mode="bilinear", align_corners=False)


def gate_encode(x: torch.Tensor, conv1: nn.Conv2d, conv2: nn.Conv2d) -> tuple[torch.Tensor, torch.Tensor]:
    gate_feature = conv1(x)
    return gate_feature, torch.sigmoid(conv2(gate_feature))


def aggregate_sources(pairs: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """Sum of gate-weighted source features, ``sum_i M_i * F_i^g``."""
    if not pairs:
        raise ShapeError("aggregate_sources needs at least one source")
    shape = pairs[0][1].shape
    total = None
    for i, (gate, feat) in enumerate(pairs):
        if gate.shape != shape or feat.shape != shape:
            raise ShapeError(
                f"source {i}: gate {tuple(gate.shape)} / feature {tuple(feat.shape)} do not match {tuple(shape)}"
            )
        term = gate * feat
        total = term if total is None else total + term
    return total


def gated_fusion(target_feature: torch.Tensor, target_gate: torch.Tensor, aggregated: torch.Tensor) -> torch.Tensor:
    if not (target_feature.shape == target_gate.shape == aggregated.shape):
        raise ShapeError(
            f"gated_fusion operands differ: {tuple(target_feature.shape)}, "
            f"{tuple(target_gate.shape)}, {tuple(aggregated.shape)}"
        )
    return (1 + target_gate) * target_feature + (1 - target_gate) * aggregated


def interaction_output(fused: torch.Tensor, conv: nn.Conv2d) -> torch.Tensor:
    return conv(fused) + fused


class GateEncoder(nn.Module):
    def __init__(self, d: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv2d(d, d, kernel_size, padding=pad)
        self.conv2 = nn.Conv2d(d, d, kernel_size, padding=pad)

    def forward(self, x):
        return gate_encode(x, self.conv1, self.conv2)


class GctiTarget(nn.Module):
    """Parameters and forward pass for one target position."""

    def __init__(self, d: int, n_sources: int, cfg: GctiConfig):
        super().__init__()
        k = cfg.kernel_size
        self.target_encoder = GateEncoder(d, k)
        n_enc = 1 if cfg.share_gate_params else n_sources
        self.source_encoders = nn.ModuleList(GateEncoder(d, k) for _ in range(n_enc))
        self.n_sources = n_sources
        self.output = nn.Conv2d(d, d, k, padding=k // 2)
        if cfg.zero_init_output:
            nn.init.zeros_(self.output.weight)
            nn.init.zeros_(self.output.bias)

    def forward(self, target: torch.Tensor, sources: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(sources) != self.n_sources:
            raise ShapeError(f"expected {self.n_sources} sources, got {len(sources)}")
        size = target.shape[-2:]
        pairs = []
        for i, src in enumerate(sources):
            enc = self.source_encoders[i % len(self.source_encoders)]
            feat, gate = enc(align_source(src, size))
            pairs.append((gate, feat))
        aggregated = aggregate_sources(pairs)
        target_feat, target_gate = self.target_encoder(target)
        return interaction_output(gated_fusion(target_feat, target_gate, aggregated), self.output)


class GCTI(nn.Module):
    """Applies the interaction once per target over ``n_features`` inputs.

    All targets read the original features, so the result does not depend on
    the order in which targets are processed.
    """

    def __init__(self, d: int, n_features: int, cfg: GctiConfig | None = None):
        super().__init__()
        cfg = (cfg or GctiConfig()).validate()
        if n_features < 2:
            raise ConfigError("n_features", "GCTI needs at least one source per target")
        targets = list(range(n_features)) if cfg.targets is None else sorted(set(cfg.targets))
        for t in targets:
            if not 0 <= t < n_features:
                raise ConfigError("targets", f"index {t} outside 0..{n_features - 1}")
        self.n_features = n_features
        self.targets = targets
        self.blocks = nn.ModuleDict({str(t): GctiTarget(d, n_features - 1, cfg) for t in targets})

    def forward(self, features: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(features) != self.n_features:
            raise ShapeError(f"GCTI built for {self.n_features} features, got {len(features)}")
        out = list(features)
        for t in self.targets:
            sources = [f for j, f in enumerate(features) if j != t]
            out[t] = self.blocks[str(t)](features[t], sources)
        return out


def apply_gcti(pyramid, module: GCTI):
    """Enhanced copy of a ``FeaturePyramid``; the input is left untouched."""
    from .features import FeaturePyramid

    feats = module(pyramid.features())
    n_levels = len(pyramid.levels)
    height = feats[n_levels] if pyramid.height_feature is not None else None
    return FeaturePyramid(feats[:n_levels], height)
