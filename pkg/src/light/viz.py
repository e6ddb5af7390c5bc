"""Overlay renderings for inference outputs."""

from __future__ import annotations

import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw

from .instance import InstanceSet


def instance_overlay(image: np.ndarray, instances: InstanceSet, alpha: float = 0.45) -> Image.Image:
    out = image.astype(np.float32).copy()
    palette = colormaps["tab20"]
    for i, m in enumerate(instances.masks):
        color = np.array(palette(i % 20)[:3]) * 255
        sel = m.astype(bool)
        out[sel] = (1 - alpha) * out[sel] + alpha * color
    img = Image.fromarray(np.clip(out, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for i, box in enumerate(instances.boxes):
        color = tuple(int(c * 255) for c in palette(i % 20)[:3])
        x1, y1, x2, y2 = (float(v) for v in box)
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], outline=color)
        if instances.scores is not None:
            draw.text((x1 + 1, y1 + 1), f"{instances.scores[i]:.2f}", fill=color)
    return img


def height_overlay(height_m: np.ndarray, max_height: float) -> Image.Image:
    norm = np.clip(np.asarray(height_m) / max_height, 0, 1)
    rgb = colormaps["viridis"](norm)[..., :3]
    return Image.fromarray((rgb * 255).round().astype(np.uint8))
