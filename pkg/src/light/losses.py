"""Training objective: weighted sum of detection, mask and height losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericalError, ShapeError


@dataclass
class LossWeights:
    det: float = 1.0
    mask: float = 1.0
    height: float = 1.0

    def validate(self) -> "LossWeights":
        for name in ("det", "mask", "height"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss_weights.{name}", f"must be finite and >= 0, got {v}")
        return self


@dataclass
class LossReport:
    det: torch.Tensor
    mask: torch.Tensor
    height: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("det", "mask", "height", "total")}


def smooth_l1(error: torch.Tensor, beta: float) -> torch.Tensor:
    """Elementwise ``0.5 e^2 / beta`` inside ``|e| < beta``, ``|e| - beta / 2`` outside."""
    a = error.abs()
    if beta == 0:
        return a
    return torch.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def _classification_and_box(logits, deltas, labels, box_targets, beta):
    """BCE over sampled entries plus smooth-L1 over positives, both / sample count.

    ``labels`` holds 1 (positive) or 0 (negative) for the sampled entries;
    ``box_targets`` has one row per positive, in order of appearance.
    """
    n = labels.numel()
    if n == 0:
        zero = logits.sum() * 0.0
        return zero, zero + deltas.sum() * 0.0
    cls = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="mean")
    pos = labels > 0
    if pos.any():
        box = smooth_l1(deltas[pos] - box_targets, beta).sum() / n
    else:
        box = deltas.sum() * 0.0
    return cls, box


def rpn_loss(logits, deltas, labels, box_targets, beta: float = 1.0 / 9):
    return _classification_and_box(logits, deltas, labels, box_targets, beta)


def roi_loss(logits, deltas, labels, box_targets, beta: float = 1.0):
    return _classification_and_box(logits, deltas, labels, box_targets, beta)


def detection_loss(rpn: tuple, roi: tuple) -> torch.Tensor:
    """Sum of RPN objectness, RPN box, RoI class and RoI box terms.

    ``rpn`` and ``roi`` are ``(logits, deltas, labels, box_targets)`` over the
    sampled anchors / RoIs of the whole batch.
    """
    rpn_cls, rpn_box = rpn_loss(*rpn)
    roi_cls, roi_box = roi_loss(*roi)
    return rpn_cls + rpn_box + roi_cls + roi_box


def mask_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel BCE over positive RoIs; 0 when there are none."""
    if logits.numel() == 0:
        return logits.sum() * 0.0
    if logits.shape != targets.shape:
        raise ShapeError(f"mask logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="mean")


def height_loss(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0,
                mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean smooth-L1 over all pixels, or over ``mask`` pixels when given."""
    if pred.shape != target.shape:
        raise ShapeError(f"height prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    per_pixel = smooth_l1(pred - target, beta)
    if mask is None:
        return per_pixel.mean()
    mask = mask.to(per_pixel.dtype)
    return (per_pixel * mask).sum() / mask.sum().clamp(min=1.0)


def total_loss(det, mask, height, weights: LossWeights | None = None) -> LossReport:
    w = weights or LossWeights()
    parts = {"det": det, "mask": mask, "height": height}
    for name, v in parts.items():
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise NumericalError(name)
    total = w.det * det + w.mask * mask + w.height * height
    return LossReport(det, mask, height, total)
