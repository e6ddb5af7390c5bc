"""Input checks and conversions used by the estimator."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError
from .height import normalize
from .synthdata import SyntheticSample, mask_to_box


def check_images(X) -> torch.Tensor:
    """``(N, H, W, 3)`` uint8 / float array (or list of them) to ``(N, 3, H, W)`` float32 in [0, 1]."""
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    if isinstance(X, (list, tuple)):
        X = np.stack([np.asarray(x) for x in X]) if len(X) else np.zeros((0, 64, 64, 3), np.uint8)
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"images must be (N, H, W, 3), got shape {X.shape}")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    else:
        X = X.astype(np.float32)
        if X.size and (not np.isfinite(X).all() or X.min() < 0 or X.max() > 1):
            raise ShapeError("float images must be finite and lie in [0, 1]")
    return torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2)))


def resize_images(images: torch.Tensor, size: int) -> torch.Tensor:
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    return F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False).clamp(0, 1)


def check_size(images: torch.Tensor) -> None:
    h, w = images.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"image size {h}x{w} must be divisible by 32")


def _resize_nearest(a: np.ndarray, size: int) -> np.ndarray:
    if a.shape[-1] == size and a.shape[-2] == size:
        return a
    t = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
    lead = t.shape[:-2]
    t = F.interpolate(t.reshape(-1, 1, *t.shape[-2:]), size=(size, size), mode="nearest")
    return t.reshape(*lead, size, size).numpy().astype(a.dtype)


def check_targets(y, n: int, size: int, max_height: float) -> list[dict]:
    """Ground truth per image as tensors at ``size`` px with normalized heights.

    Each entry of ``y`` is a ``SyntheticSample`` or a mapping with ``masks``
    (G, H, W) and ``height`` (H, W, meters); boxes are rederived from the
    resized masks.
    """
    if len(y) != n:
        raise ShapeError(f"{n} images but {len(y)} targets")
    out = []
    for i, t in enumerate(y):
        if isinstance(t, SyntheticSample):
            masks, height = t.masks, t.height
        else:
            masks, height = np.asarray(t["masks"]), np.asarray(t["height"])
        masks = np.asarray(masks, dtype=np.uint8).reshape(-1, *np.shape(height))
        masks = _resize_nearest(masks, size)
        height = _resize_nearest(np.asarray(height, np.float32), size)
        masks = masks[masks.reshape(len(masks), -1).any(axis=1)]
        boxes = np.stack([mask_to_box(m) for m in masks]) if len(masks) else np.zeros((0, 4), np.float32)
        if not np.isfinite(height).all() or (height < 0).any():
            raise ShapeError(f"target {i}: height map must be finite and nonnegative")
        out.append({
            "boxes": torch.from_numpy(boxes),
            "masks": torch.from_numpy(masks),
            "height": torch.from_numpy(normalize(height, max_height).astype(np.float32)),
        })
    return out


def flip_batch(images: torch.Tensor, targets: list[dict], horizontal: bool, vertical: bool):
    dims = [d for d, on in ((-1, horizontal), (-2, vertical)) if on]
    if not dims:
        return images, targets
    h, w = images.shape[-2:]
    images = images.flip(dims)
    out = []
    for t in targets:
        b = t["boxes"].clone()
        if horizontal:
            b[:, [0, 2]] = w - t["boxes"][:, [2, 0]]
        if vertical:
            b[:, [1, 3]] = h - t["boxes"][:, [3, 1]]
        out.append({"boxes": b, "masks": t["masks"].flip(dims), "height": t["height"].flip(dims)})
    return images, out
