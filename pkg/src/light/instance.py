"""Mask R-CNN style detection and segmentation over the (enhanced) pyramid.

Boxes are ``[x1, y1, x2, y2]`` in pixel-edge coordinates: pixel ``(r, c)``
covers ``[c, c + 1) x [r, r + 1)`` and its center sits at ``(c + .5, r + .5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision import ops

from .errors import ShapeError

BBOX_CLIP = math.log(1000.0 / 16)
NEGATIVE = -1
IGNORE = -2


@dataclass
class InstanceSet:
    boxes: np.ndarray  # (N, 4) float32
    masks: np.ndarray  # (N, H, W) uint8
    scores: np.ndarray | None = None  # (N,) for predictions

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def empty(cls, size: tuple[int, int], with_scores=True) -> "InstanceSet":
        return cls(
            np.zeros((0, 4), np.float32),
            np.zeros((0, *size), np.uint8),
            np.zeros(0, np.float32) if with_scores else None,
        )


@dataclass
class InstanceConfig:
    anchor_scales: list[float] = field(default_factory=lambda: [32, 64, 128, 256])
    anchor_ratios: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    rpn_pre_nms: int = 1000
    rpn_post_nms: int = 256
    rpn_nms_iou: float = 0.7
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    roi_fg_iou: float = 0.5
    roi_bg_iou: float = 0.4
    roi_batch: int = 128
    roi_pos_fraction: float = 0.25
    representation: int = 1024
    mask_convs: int = 4
    score_thresh: float = 0.05
    det_nms_iou: float = 0.5
    max_det: int = 100
    level_k0: int = 2
    level_canonical: float = 224.0
    roi_box_weights: tuple[float, float, float, float] = (10.0, 10.0, 5.0, 5.0)


# ---------------------------------------------------------------- anchors / boxes


def anchor_shapes(scale: float, ratios: Sequence[float]) -> list[tuple[float, float]]:
    """(width, height) per ratio, ratio = height / width, area = scale ** 2."""
    return [(scale / math.sqrt(r), scale * math.sqrt(r)) for r in ratios]


def generate_anchors(level_shapes, strides, scales, ratios, dtype=torch.float32) -> list[torch.Tensor]:
    """Per-level ``(H * W * A, 4)`` anchors ordered row, column, ratio."""
    if not (len(level_shapes) == len(strides) == len(scales)):
        raise ShapeError("need one stride and one scale per pyramid level")
    out = []
    for (h, w), stride, scale in zip(level_shapes, strides, scales):
        wh = torch.tensor(anchor_shapes(scale, ratios), dtype=dtype)
        cy = (torch.arange(h, dtype=dtype) + 0.5) * stride
        cx = (torch.arange(w, dtype=dtype) + 0.5) * stride
        cy, cx = torch.meshgrid(cy, cx, indexing="ij")
        ctr = torch.stack([cx, cy], dim=-1).reshape(-1, 1, 2)
        half = wh.reshape(1, -1, 2) / 2
        out.append(torch.cat([ctr - half, ctr + half], dim=-1).reshape(-1, 4))
    return out


def encode_boxes(boxes: torch.Tensor, anchors: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    return torch.stack(
        [wx * (bx - ax) / aw, wy * (by - ay) / ah, ww * torch.log(bw / aw), wh * torch.log(bh / ah)], dim=1
    )


def decode_boxes(deltas: torch.Tensor, anchors: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=BBOX_CLIP)
    dh = (deltas[:, 3] / wh).clamp(max=BBOX_CLIP)
    x = ax + dx * aw
    y = ay + dy * ah
    w = aw * torch.exp(dw)
    h = ah * torch.exp(dh)
    return torch.stack([x - 0.5 * w, y - 0.5 * h, x + 0.5 * w, y + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    h, w = size
    x = boxes[:, 0::2].clamp(0, w)
    y = boxes[:, 1::2].clamp(0, h)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy NMS; indices of kept boxes in descending score order."""
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    return ops.nms(boxes.float(), scores.float(), iou_threshold)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ops.box_iou(a, b)


# ---------------------------------------------------------------- RoIAlign


def assign_levels(boxes: torch.Tensor, n_levels: int, k0: int = 2, canonical: float = 224.0) -> torch.Tensor:
    """FPN level index ``floor(k0 + log2(sqrt(wh) / canonical))`` clamped to the pyramid."""
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    k = torch.floor(k0 + torch.log2(torch.sqrt(area.clamp(min=1e-6)) / canonical))
    return k.clamp(0, n_levels - 1).long()


def roi_align(feature: torch.Tensor, rois: torch.Tensor, output_size: int, spatial_scale: float = 1.0,
              sampling_ratio: int = 2) -> torch.Tensor:
    """Bilinear region pooling with ``sampling_ratio ** 2`` samples per bin.

    ``rois`` is ``(K, 5)``: batch index then the box. Feature cell ``j`` is
    centered on input coordinate ``(j + .5) / spatial_scale``.
    """
    if rois.numel() == 0:
        return feature.new_zeros((0, feature.shape[1], output_size, output_size))
    w = rois[:, 3] - rois[:, 1]
    h = rois[:, 4] - rois[:, 2]
    bad = torch.nonzero((w <= 0) | (h <= 0)).flatten()
    if bad.numel():
        i = int(bad[0])
        raise ShapeError(f"degenerate RoI {i}: box {rois[i, 1:].tolist()}")
    return ops.roi_align(feature, rois.to(feature.dtype), output_size, spatial_scale, sampling_ratio, aligned=True)


def multilevel_roi_align(levels: Sequence[torch.Tensor], boxes: Sequence[torch.Tensor], strides: Sequence[int],
                         output_size: int, k0: int = 2, canonical: float = 224.0) -> torch.Tensor:
    """Pool every box of every image from its assigned level; output keeps input order."""
    rois = torch.cat(
        [torch.cat([torch.full((len(b), 1), i, dtype=b.dtype), b], dim=1) for i, b in enumerate(boxes)], dim=0
    )
    out = levels[0].new_zeros((len(rois), levels[0].shape[1], output_size, output_size))
    if len(rois) == 0:
        return out
    lvl = assign_levels(rois[:, 1:], len(levels), k0, canonical)
    for k, (feat, stride) in enumerate(zip(levels, strides)):
        idx = torch.nonzero(lvl == k).flatten()
        if idx.numel():
            out[idx] = roi_align(feat, rois[idx], output_size, 1.0 / stride)
    return out


# ---------------------------------------------------------------- heads


class RPNHead(nn.Module):
    def __init__(self, d: int, n_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(d, d, 3, padding=1)
        self.cls_logits = nn.Conv2d(d, n_anchors, 1)
        self.bbox_pred = nn.Conv2d(d, 4 * n_anchors, 1)
        for m in (self.conv, self.cls_logits, self.bbox_pred):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    def forward(self, levels: Sequence[torch.Tensor]) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        """Per-level logits ``(B, H*W*A)`` and deltas ``(B, H*W*A, 4)``."""
        logits, deltas = [], []
        for x in levels:
            t = F.relu(self.conv(x))
            b, _, h, w = t.shape
            logits.append(self.cls_logits(t).permute(0, 2, 3, 1).reshape(b, -1))
            deltas.append(self.bbox_pred(t).reshape(b, -1, 4, h, w).permute(0, 3, 4, 1, 2).reshape(b, -1, 4))
        return logits, deltas


class BoxHead(nn.Module):
    def __init__(self, d: int, representation: int = 1024, pool: int = 7):
        super().__init__()
        self.fc1 = nn.Linear(d * pool * pool, representation)
        self.fc2 = nn.Linear(representation, representation)
        self.cls_score = nn.Linear(representation, 1)
        self.bbox_pred = nn.Linear(representation, 4)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.zeros_(self.bbox_pred.bias)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = F.relu(self.fc1(x.flatten(1)))
        x = F.relu(self.fc2(x))
        return self.cls_score(x), self.bbox_pred(x)


class MaskHead(nn.Module):
    """Convs at 14x14, one 2x transposed conv, 1x1 predictor to 28x28 logits."""

    def __init__(self, d: int, n_convs: int = 4):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(d, d, 3, padding=1) for _ in range(n_convs))
        self.upsample = nn.ConvTranspose2d(d, d, 2, stride=2)
        self.predictor = nn.Conv2d(d, 1, 1)
        for m in [*self.convs, self.upsample, self.predictor]:
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = F.relu(conv(x))
        x = F.relu(self.upsample(x))
        return self.predictor(x)[:, 0]


# ---------------------------------------------------------------- selection


def select_proposals(objectness: torch.Tensor, deltas: torch.Tensor, anchors: torch.Tensor,
                     image_size: tuple[int, int], pre_nms: int = 1000, post_nms: int = 256,
                     nms_iou: float = 0.7, min_size: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Proposals for one image from flattened per-anchor scores and deltas."""
    k = min(pre_nms, objectness.numel())
    scores, idx = objectness.topk(k, sorted=True)
    boxes = clip_boxes(decode_boxes(deltas[idx], anchors[idx]), image_size)
    wh = boxes[:, 2:] - boxes[:, :2]
    ok = (wh >= min_size).all(dim=1)
    boxes, scores = boxes[ok], scores[ok]
    keep = nms(boxes, scores, nms_iou)[:post_nms]
    return boxes[keep], scores[keep]


def match_boxes(iou: torch.Tensor, high: float, low: float, allow_low_quality: bool) -> torch.Tensor:
    """Per-column GT index, ``NEGATIVE`` below ``low``, ``IGNORE`` in between.

    ``iou`` is ``(G, N)``. With ``allow_low_quality`` every GT also claims the
    columns where it attains its own best IoU.
    """
    n = iou.shape[1]
    if iou.shape[0] == 0:
        return torch.full((n,), NEGATIVE, dtype=torch.long)
    vals, idx = iou.max(dim=0)
    matched = idx.clone()
    matched[vals < low] = NEGATIVE
    matched[(vals >= low) & (vals < high)] = IGNORE
    if allow_low_quality:
        best = iou.max(dim=1, keepdim=True).values
        gt_i, col = torch.nonzero((iou == best) & (best > 0), as_tuple=True)
        matched[col] = idx[col]
    return matched


def sample_labels(matched: torch.Tensor, batch: int, pos_fraction: float,
                  generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Random subset of positive and negative column indices."""
    pos = torch.nonzero(matched >= 0).flatten()
    neg = torch.nonzero(matched == NEGATIVE).flatten()
    n_pos = min(pos.numel(), int(batch * pos_fraction))
    n_neg = min(neg.numel(), batch - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
    return pos, neg


def mask_targets(gt_masks: torch.Tensor, matched: torch.Tensor, boxes: torch.Tensor, size: int = 28) -> torch.Tensor:
    """GT masks of the matched instances cropped to ``boxes`` and binarized."""
    if boxes.numel() == 0:
        return gt_masks.new_zeros((0, size, size), dtype=torch.float32)
    rois = torch.cat([matched[:, None].to(boxes.dtype), boxes], dim=1)
    crops = roi_align(gt_masks[:, None].float(), rois, size, 1.0, 2)[:, 0]
    return (crops >= 0.5).float()


# ---------------------------------------------------------------- postprocess


def paste_masks(mask_probs: torch.Tensor, boxes: torch.Tensor, image_size: tuple[int, int],
                threshold: float = 0.5) -> torch.Tensor:
    """Resize ``(N, M, M)`` probabilities into their boxes; binary ``(N, H, W)``."""
    h, w = image_size
    n = len(boxes)
    if n == 0:
        return torch.zeros((0, h, w), dtype=torch.uint8)
    px = torch.arange(w, dtype=boxes.dtype) + 0.5
    py = torch.arange(h, dtype=boxes.dtype) + 0.5
    x1, y1, x2, y2 = (boxes[:, i, None] for i in range(4))
    gx = 2 * (px[None] - x1) / (x2 - x1) - 1
    gy = 2 * (py[None] - y1) / (y2 - y1) - 1
    inside = ((px[None] >= x1) & (px[None] < x2))[:, None, :] & ((py[None] >= y1) & (py[None] < y2))[:, :, None]
    grid = torch.stack(torch.broadcast_tensors(gx[:, None, :], gy[:, :, None]), dim=-1)
    full = F.grid_sample(mask_probs[:, None].to(grid.dtype), grid, mode="bilinear", padding_mode="border",
                         align_corners=False)[:, 0]
    return ((full >= threshold) & inside).to(torch.uint8)


def postprocess(boxes: torch.Tensor, scores: torch.Tensor, mask_probs: torch.Tensor | None,
                image_size: tuple[int, int], score_thresh: float = 0.05, nms_iou: float = 0.5,
                max_det: int = 100) -> InstanceSet:
    """Threshold, NMS and top-k; masks (if given, aligned with ``boxes``) pasted and binarized."""
    boxes = clip_boxes(boxes, image_size)
    keep = select_detections(boxes, scores, image_size, score_thresh, nms_iou, max_det)
    probs = mask_probs[keep] if mask_probs is not None else None
    return build_instances(boxes[keep], scores[keep], probs, image_size)


def build_instances(boxes: torch.Tensor, scores: torch.Tensor, mask_probs: torch.Tensor | None,
                    image_size: tuple[int, int]) -> InstanceSet:
    if len(boxes) == 0:
        return InstanceSet.empty(image_size)
    if mask_probs is None:
        mask_probs = boxes.new_ones((len(boxes), 28, 28))
    masks = paste_masks(mask_probs.detach(), boxes.detach(), image_size)
    return InstanceSet(boxes.detach().float().numpy(), masks.numpy(), scores.detach().float().numpy())


def select_detections(boxes: torch.Tensor, scores: torch.Tensor, image_size: tuple[int, int],
                      score_thresh: float = 0.05, nms_iou: float = 0.5, max_det: int = 100) -> torch.Tensor:
    """Indices surviving threshold, degenerate-box removal, NMS and top-k."""
    boxes = clip_boxes(boxes, image_size)
    wh = boxes[:, 2:] - boxes[:, :2]
    cand = torch.nonzero((scores > score_thresh) & (wh >= 1.0).all(dim=1)).flatten()
    if cand.numel() == 0:
        return cand
    keep = nms(boxes[cand], scores[cand], nms_iou)[:max_det]
    return cand[keep]
