"""The unified two-branch network and its ablation modes."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
from torch import nn

from . import instance as inst
from .errors import ConfigError
from .features import STRIDES, Backbone, BackboneConfig, FeaturePyramid, FPN, HeightFeature
from .gcti import GCTI, GctiConfig, apply_gcti
from .height import PPM, HeightHead, PpmConfig
from .losses import detection_loss, height_loss, mask_loss

MODES = ("joint+gcti", "joint", "seg_only", "height_only")
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class ModelConfig:
    mode: str = "joint+gcti"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gcti: GctiConfig = field(default_factory=GctiConfig)
    ppm: PpmConfig = field(default_factory=PpmConfig)
    instance: inst.InstanceConfig = field(default_factory=inst.InstanceConfig)
    height_beta: float = 1.0
    # "all" supervises background pixels with target 0 as well
    height_loss_mask: str = "all"

    def validate(self) -> "ModelConfig":
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.height_loss_mask not in ("all", "buildings_only"):
            raise ConfigError("height_loss_mask", f"must be 'all' or 'buildings_only', got {self.height_loss_mask!r}")
        self.backbone.validate()
        self.gcti.validate()
        self.ppm.validate()
        if len(self.instance.anchor_scales) != len(STRIDES):
            raise ConfigError("anchor_scales", f"need one scale per level ({len(STRIDES)})")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        sub = {"backbone": BackboneConfig, "gcti": GctiConfig, "ppm": PpmConfig, "instance": inst.InstanceConfig}
        for key, typ in sub.items():
            if key in d and isinstance(d[key], dict):
                d[key] = _build(typ, d[key], key)
        return _build(cls, d, "model")


def _build(typ, d, where):
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}.{sorted(unknown)[0]}", "unknown field")
    obj = typ(**d)
    if typ is inst.InstanceConfig:
        obj.roi_box_weights = tuple(obj.roi_box_weights)
    return obj


class LightNet(nn.Module):
    """Shared backbone feeding an instance branch and a height branch.

    ``mode`` selects which branches exist. ``joint`` differs from
    ``joint+gcti`` only in skipping the interaction module.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = (cfg or ModelConfig()).validate()
        mode = self.cfg.mode
        self.has_seg = mode != "height_only"
        self.has_height = mode != "seg_only"
        d = self.cfg.backbone.fpn_channels

        self.backbone = Backbone(self.cfg.backbone)
        widths = self.backbone.out_channels
        self.fpn = FPN(widths, d) if self.has_seg else None
        self.height_feature = HeightFeature(widths[0], d) if self.has_height else None
        self.gcti = GCTI(d, len(STRIDES) + 1, self.cfg.gcti) if mode == "joint+gcti" else None

        ic = self.cfg.instance
        if self.has_seg:
            self.rpn = inst.RPNHead(d, len(ic.anchor_ratios))
            self.box_head = inst.BoxHead(d, ic.representation)
            self.mask_head = inst.MaskHead(d, ic.mask_convs)
        if self.has_height:
            self.ppm = PPM(d, self.cfg.ppm)
            self.height_head = HeightHead(d)
        self._anchor_cache: dict = {}

    # ------------------------------------------------------------ features

    def pyramid(self, images: torch.Tensor) -> FeaturePyramid:
        x = (images - PIXEL_MEAN) / PIXEL_STD
        stages = self.backbone(x)
        levels = self.fpn(stages) if self.fpn is not None else []
        fh = self.height_feature(stages) if self.height_feature is not None else None
        pyr = FeaturePyramid(levels, fh)
        if self.gcti is not None:
            pyr = apply_gcti(pyr, self.gcti)
        return pyr

    def anchors(self, levels) -> torch.Tensor:
        shapes = tuple(tuple(x.shape[-2:]) for x in levels)
        key = (shapes, levels[0].dtype)
        if key not in self._anchor_cache:
            ic = self.cfg.instance
            per_level = inst.generate_anchors(shapes, STRIDES, ic.anchor_scales, ic.anchor_ratios, levels[0].dtype)
            self._anchor_cache[key] = torch.cat(per_level, 0)
        return self._anchor_cache[key]

    def predict_height(self, fh: torch.Tensor) -> torch.Tensor:
        return self.height_head(self.ppm(fh))

    def _proposals(self, logits, deltas, anchors, size):
        ic = self.cfg.instance
        with torch.no_grad():
            return [
                inst.select_proposals(torch.sigmoid(logits[b]), deltas[b], anchors, size, ic.rpn_pre_nms,
                                      ic.rpn_post_nms, ic.rpn_nms_iou)[0]
                for b in range(logits.shape[0])
            ]

    def _pool(self, levels, boxes, size):
        ic = self.cfg.instance
        return inst.multilevel_roi_align(levels, boxes, STRIDES, size, ic.level_k0, ic.level_canonical)

    # ------------------------------------------------------------ training

    def forward_train(self, images: torch.Tensor, targets: list[dict],
                      generator: torch.Generator | None = None) -> dict[str, torch.Tensor]:
        """Loss parts ``det``, ``mask``, ``height`` (zero for an absent branch)."""
        pyr = self.pyramid(images)
        zero = images.new_zeros(())
        parts = {"det": zero, "mask": zero, "height": zero}
        if self.has_seg:
            parts["det"], parts["mask"] = self._instance_losses(pyr.levels, targets, images.shape[-2:], generator)
        if self.has_height:
            pred = self.predict_height(pyr.height_feature)
            tgt = torch.stack([t["height"] for t in targets]).to(pred.dtype)
            mask = (tgt > 0) if self.cfg.height_loss_mask == "buildings_only" else None
            parts["height"] = height_loss(pred, tgt, self.cfg.height_beta, mask)
        return parts

    def _instance_losses(self, levels, targets, size, generator):
        ic = self.cfg.instance
        size = tuple(int(s) for s in size)
        logits_l, deltas_l = self.rpn(levels)
        logits, deltas = torch.cat(logits_l, 1), torch.cat(deltas_l, 1)
        anchors = self.anchors(levels)
        proposals = self._proposals(logits.detach(), deltas.detach(), anchors, size)

        rpn_parts = ([], [], [], [])
        roi_boxes, roi_labels, roi_targets = [], [], []
        mask_boxes, mask_tgts = [], []
        for b, tgt in enumerate(targets):
            gt = tgt["boxes"].to(anchors.dtype)
            matched = inst.match_boxes(inst.box_iou(gt, anchors), ic.rpn_fg_iou, ic.rpn_bg_iou, True)
            pos, neg = inst.sample_labels(matched, ic.rpn_batch, ic.rpn_pos_fraction, generator)
            idx = torch.cat([pos, neg])
            rpn_parts[0].append(logits[b, idx])
            rpn_parts[1].append(deltas[b, idx])
            rpn_parts[2].append(torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))]))
            rpn_parts[3].append(inst.encode_boxes(gt[matched[pos]], anchors[pos]))

            props = torch.cat([proposals[b], gt])
            matched = inst.match_boxes(inst.box_iou(gt, props), ic.roi_fg_iou, ic.roi_bg_iou, False)
            pos, neg = inst.sample_labels(matched, ic.roi_batch, ic.roi_pos_fraction, generator)
            roi_boxes.append(torch.cat([props[pos], props[neg]]))
            roi_labels.append(torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))]))
            roi_targets.append(inst.encode_boxes(gt[matched[pos]], props[pos], ic.roi_box_weights))
            mask_boxes.append(props[pos])
            mask_tgts.append(inst.mask_targets(tgt["masks"], matched[pos], props[pos]))

        rpn = tuple(torch.cat(p) for p in rpn_parts)
        cls_logits, box_deltas = self.box_head(self._pool(levels, roi_boxes, 7))
        roi = (cls_logits[:, 0], box_deltas, torch.cat(roi_labels), torch.cat(roi_targets))
        det = detection_loss(rpn, roi)

        n_masks = sum(len(m) for m in mask_boxes)
        if n_masks:
            mask_logits = self.mask_head(self._pool(levels, mask_boxes, 14))
            m_loss = mask_loss(mask_logits, torch.cat(mask_tgts))
        else:
            m_loss = sum(p.sum() for p in self.mask_head.parameters()) * 0.0
        return det, m_loss

    # ------------------------------------------------------------ inference

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> tuple[list[inst.InstanceSet] | None, torch.Tensor | None]:
        """Instance sets per image and normalized height maps ``(B, H, W)``."""
        pyr = self.pyramid(images)
        size = tuple(int(s) for s in images.shape[-2:])
        instances = self._detect(pyr.levels, size) if self.has_seg else None
        heights = self.predict_height(pyr.height_feature) if self.has_height else None
        return instances, heights

    def _detect(self, levels, size):
        ic = self.cfg.instance
        logits_l, deltas_l = self.rpn(levels)
        logits, deltas = torch.cat(logits_l, 1), torch.cat(deltas_l, 1)
        proposals = self._proposals(logits, deltas, self.anchors(levels), size)
        cls_logits, box_deltas = self.box_head(self._pool(levels, proposals, 7))
        counts = [len(p) for p in proposals]
        out = []
        for b, (props, cl, bd) in enumerate(zip(proposals, cls_logits.split(counts), box_deltas.split(counts))):
            boxes = inst.clip_boxes(inst.decode_boxes(bd, props, ic.roi_box_weights), size)
            scores = torch.sigmoid(cl[:, 0])
            keep = inst.select_detections(boxes, scores, size, ic.score_thresh, ic.det_nms_iou, ic.max_det)
            boxes, scores = boxes[keep], scores[keep]
            probs = None
            if len(boxes):
                feats = self._pool([lv[b : b + 1] for lv in levels], [boxes], 14)
                probs = torch.sigmoid(self.mask_head(feats))
            out.append(inst.build_instances(boxes, scores, probs, size))
        return out
