"""Instance-segmentation AP and height threshold accuracy.

All metric values are reported in percent. Quantities that are undefined on a
split (no ground-truth instances, no building pixels) come back as ``None``
rather than a number.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        warnings.warn("IoU of two empty masks is taken as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return np.count_nonzero(a & b) / union


def mask_iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """``(P, G)`` IoU between stacks of binary masks."""
    if len(pred) == 0 or len(gt) == 0:
        return np.zeros((len(pred), len(gt)))
    if pred.shape[1:] != gt.shape[1:]:
        raise ShapeError(f"mask shapes differ: {pred.shape[1:]} vs {gt.shape[1:]}")
    p = (pred.reshape(len(pred), -1) > 0).astype(np.float64)
    g = (gt.reshape(len(gt), -1) > 0).astype(np.float64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def box_iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    if len(pred) == 0 or len(gt) == 0:
        return np.zeros((len(pred), len(gt)))
    p = np.asarray(pred, np.float64)[:, None]
    g = np.asarray(gt, np.float64)[None]
    iw = np.clip(np.minimum(p[..., 2], g[..., 2]) - np.maximum(p[..., 0], g[..., 0]), 0, None)
    ih = np.clip(np.minimum(p[..., 3], g[..., 3]) - np.maximum(p[..., 1], g[..., 1]), 0, None)
    inter = iw * ih
    area = lambda b: (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])  # noqa: E731
    union = area(p) + area(g) - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def greedy_match(iou: np.ndarray, threshold: float) -> np.ndarray:
    """True-positive flags for predictions (rows already in descending score).

    Each prediction takes the unmatched GT with the highest IoU, provided that
    IoU reaches ``threshold``.
    """
    n_pred, n_gt = iou.shape
    tp = np.zeros(n_pred, dtype=bool)
    taken = np.zeros(n_gt, dtype=bool)
    for i in range(n_pred):
        if n_gt == 0:
            break
        cand = np.where(taken, -1.0, iou[i])
        j = int(np.argmax(cand))
        if cand[j] >= threshold:
            tp[i] = True
            taken[j] = True
    return tp


def interpolated_ap(tp: np.ndarray, scores: np.ndarray, n_gt: int) -> float | None:
    """101-point interpolated AP from per-prediction TP flags and scores."""
    if n_gt == 0:
        return None
    if len(tp) == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order].astype(np.float64)
    tps = np.cumsum(tp)
    fps = np.cumsum(1.0 - tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _per_image_ious(predictions, ground_truth, iou_type):
    out = []
    for pred, gt in zip(predictions, ground_truth):
        order = np.argsort(-np.asarray(pred.scores), kind="mergesort")
        if iou_type == "mask":
            iou = mask_iou_matrix(np.asarray(pred.masks)[order], np.asarray(gt.masks))
        else:
            iou = box_iou_matrix(np.asarray(pred.boxes)[order], np.asarray(gt.boxes))
        out.append((iou, np.asarray(pred.scores, np.float64)[order]))
    return out


def ap_per_threshold(predictions: Sequence, ground_truth: Sequence, thresholds=IOU_THRESHOLDS,
                     iou_type: str = "mask") -> dict[float, float | None]:
    """AP (fraction in [0, 1]) at each IoU threshold over a whole split."""
    if len(predictions) != len(ground_truth):
        raise ShapeError(f"{len(predictions)} prediction sets for {len(ground_truth)} images")
    n_gt = sum(len(g) for g in ground_truth)
    per_image = _per_image_ious(predictions, ground_truth, iou_type)
    result = {}
    for t in thresholds:
        tps, scores = [], []
        for iou, s in per_image:
            tps.append(greedy_match(iou, t))
            scores.append(s)
        tp = np.concatenate(tps) if tps else np.zeros(0, bool)
        sc = np.concatenate(scores) if scores else np.zeros(0)
        result[float(t)] = interpolated_ap(tp, sc, n_gt)
    return result


def average_precision(predictions, ground_truth, iou_thresh: float, iou_type: str = "mask") -> float | None:
    return ap_per_threshold(predictions, ground_truth, [iou_thresh], iou_type)[float(iou_thresh)]


def map_metric(predictions, ground_truth, iou_type: str = "mask") -> tuple[float | None, float | None]:
    """(mAP, AP50) in percent."""
    table = ap_per_threshold(predictions, ground_truth, IOU_THRESHOLDS, iou_type)
    return _summarize(table)


def _summarize(table):
    values = list(table.values())
    if any(v is None for v in values):
        return None, None
    return 100.0 * float(np.mean(values)), 100.0 * table[0.5]


def delta_counts(pred_m: np.ndarray, gt_m: np.ndarray, min_gt: float = 1.0, floor: float = 0.1):
    """(hits for k=1,2,3, evaluated pixel count) for one height map pair."""
    pred_m = np.asarray(pred_m, np.float64)
    gt_m = np.asarray(gt_m, np.float64)
    if pred_m.shape != gt_m.shape:
        raise ShapeError(f"height maps differ: {pred_m.shape} vs {gt_m.shape}")
    sel = gt_m > min_gt
    p = np.maximum(pred_m[sel], floor)
    g = gt_m[sel]
    ratio = np.maximum(p / g, g / p)
    hits = np.array([np.count_nonzero(ratio < 1.25**k) for k in (1, 2, 3)])
    return hits, int(sel.sum())


def delta_accuracy(pred_m: np.ndarray, gt_m: np.ndarray, k: int) -> float | None:
    if k not in (1, 2, 3):
        raise ValueError(f"k must be 1, 2 or 3, got {k}")
    hits, n = delta_counts(pred_m, gt_m)
    if n == 0:
        return None
    return 100.0 * hits[k - 1] / n


@dataclass
class MetricsReport:
    mAP: float | None = None
    AP50: float | None = None
    delta1: float | None = None
    delta2: float | None = None
    delta3: float | None = None
    ap_per_threshold: dict = field(default_factory=dict)
    box_mAP: float | None = None
    box_AP50: float | None = None
    n_images: int = 0
    n_gt: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ap_per_threshold"] = {f"{k:.2f}": (None if v is None else 100.0 * v) for k, v in self.ap_per_threshold.items()}
        return d


def evaluate_split(predictions=None, ground_truth=None, pred_heights=None, gt_heights=None) -> MetricsReport:
    """Metrics over a split. Either task may be absent (pass ``None``)."""
    report = MetricsReport()
    if ground_truth is not None:
        report.n_images = len(ground_truth)
        report.n_gt = int(sum(len(g) for g in ground_truth))
    elif gt_heights is not None:
        report.n_images = len(gt_heights)
    if predictions is not None:
        table = ap_per_threshold(predictions, ground_truth, IOU_THRESHOLDS, "mask")
        report.ap_per_threshold = table
        report.mAP, report.AP50 = _summarize(table)
        report.box_mAP, report.box_AP50 = map_metric(predictions, ground_truth, "box")
    if pred_heights is not None:
        hits = np.zeros(3, dtype=np.int64)
        n = 0
        for p, g in zip(pred_heights, gt_heights):
            h, c = delta_counts(p, g)
            hits += h
            n += c
        if n:
            report.delta1, report.delta2, report.delta3 = (100.0 * hits / n).tolist()
    return report
