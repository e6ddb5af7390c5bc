"""Procedural satellite-like scenes of rectangular buildings.

Each scene carries exact ground truth: per-building visible masks, tight boxes
and a height map in meters. Roof brightness grows monotonically with height so
the height task can be learned from RGB alone.

On-disk layout of a dataset directory::

    manifest.json
    sample_000000/image.png        8-bit RGB
    sample_000000/height.bin       LGHT grid (see ``write_height_grid``)
    sample_000000/instances.json   [{"box", "rle_mask", "height_m"}, ...]
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

HEIGHT_MAGIC = b"LGHT"
_HEADER = struct.Struct("<4sIII")


@dataclass
class SceneSpec:
    image_size: int = 512
    n_buildings_range: tuple[int, int] = (3, 12)
    footprint_range: tuple[int, int] = (16, 96)
    height_range: tuple[float, float] = (3.0, 100.0)
    rotation: bool = False
    texture_noise: float = 0.03
    seed: int = 0
    # rejection-sample footprints so buildings never touch
    allow_overlap: bool = True

    def __post_init__(self):
        self.n_buildings_range = tuple(self.n_buildings_range)
        self.footprint_range = tuple(self.footprint_range)
        self.height_range = tuple(float(h) for h in self.height_range)

    @classmethod
    def desk(cls, seed: int = 0) -> "SceneSpec":
        """Small-image preset used for the desk-scale experiments."""
        return cls(
            image_size=128,
            n_buildings_range=(2, 5),
            footprint_range=(14, 40),
            height_range=(8.0, 60.0),
            rotation=False,
            texture_noise=0.03,
            seed=seed,
            allow_overlap=False,
        )

    @property
    def max_height(self) -> float:
        return self.height_range[1]

    def validate(self) -> "SceneSpec":
        if self.image_size < 64 or self.image_size % 32:
            raise ConfigError("image_size", f"must be >= 64 and divisible by 32, got {self.image_size}")
        lo, hi = self.n_buildings_range
        if lo < 0 or hi < lo:
            raise ConfigError("n_buildings_range", f"invalid interval {self.n_buildings_range}")
        lo, hi = self.footprint_range
        if lo < 1 or hi < lo or hi >= self.image_size:
            raise ConfigError(
                "footprint_range", f"need 1 <= min <= max < image_size, got {self.footprint_range}"
            )
        lo, hi = self.height_range
        if not (0 < lo <= hi) or not math.isfinite(hi):
            raise ConfigError("height_range", f"need 0 < min <= max, got {self.height_range}")
        if not 0 <= self.texture_noise <= 1:
            raise ConfigError("texture_noise", f"must lie in [0, 1], got {self.texture_noise}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown SceneSpec field")
        return cls(**d)


@dataclass
class Building:
    cx: float
    cy: float
    width: float
    length: float
    height_m: float
    angle: float = 0.0  # radians


@dataclass
class SyntheticSample:
    image: np.ndarray  # (H, W, 3) uint8
    boxes: np.ndarray  # (N, 4) float32 x1, y1, x2, y2 (pixel edges)
    masks: np.ndarray  # (N, H, W) uint8
    heights_m: np.ndarray  # (N,) float32
    height: np.ndarray  # (H, W) float32 meters
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.boxes)


def rasterize(b: Building, size: int) -> np.ndarray:
    """Pixels whose centers fall inside the (possibly rotated) rectangle."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - b.cx, ys - b.cy
    c, s = math.cos(b.angle), math.sin(b.angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= b.width / 2) & (np.abs(v) <= b.length / 2)


def mask_to_box(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float32)


def render_scene(spec: SceneSpec, buildings: list[Building], rng=None, meta=None) -> SyntheticSample:
    """Rasterize ``buildings`` tallest-last and shade the image."""
    size = spec.image_size
    rng = rng if rng is not None else np.random.default_rng([int(spec.seed), 2**31])
    order = sorted(range(len(buildings)), key=lambda k: buildings[k].height_m)
    owner = np.full((size, size), -1, dtype=np.int64)
    for k in order:
        owner[rasterize(buildings[k], size)] = k

    # instances sorted by descending height; fully hidden buildings are dropped
    keep = [k for k in reversed(order) if (owner == k).any()]
    masks = np.stack([(owner == k).astype(np.uint8) for k in keep]) if keep else np.zeros((0, size, size), np.uint8)
    boxes = np.stack([mask_to_box(m) for m in masks]) if keep else np.zeros((0, 4), np.float32)
    heights = np.array([buildings[k].height_m for k in keep], dtype=np.float32)

    height = np.zeros((size, size), dtype=np.float32)
    for m, h in zip(masks, heights):
        height[m.astype(bool)] = h

    image = _shade(height, spec, rng)
    meta = dict(meta or {})
    meta["buildings"] = [dataclasses.asdict(buildings[k]) for k in keep]
    return SyntheticSample(image, boxes, masks, heights, height, meta)


def _shade(height: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    ys, xs = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi, size=2)
    ground = 0.22 + 0.04 * np.sin(2 * np.pi * 1.5 * xs + phase[0]) * np.cos(2 * np.pi * 1.2 * ys + phase[1])
    img = np.stack([ground * 0.95, ground * 1.05, ground * 0.85], axis=-1)

    roof = height > 0
    level = 0.35 + 0.6 * np.clip(height / spec.max_height, 0, 1)
    tint = np.array([1.0, 0.97, 0.93])
    img[roof] = level[roof, None] * tint

    img = img + rng.normal(0.0, spec.texture_noise, size=img.shape)
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def _sample_buildings(spec: SceneSpec, rng: np.random.Generator) -> list[Building]:
    size = spec.image_size
    n = int(rng.integers(spec.n_buildings_range[0], spec.n_buildings_range[1] + 1))
    lo, hi = spec.footprint_range
    out: list[Building] = []
    occupied = np.zeros((size, size), dtype=bool)
    attempts = 0
    while len(out) < n and attempts < 50 * max(n, 1):
        attempts += 1
        w, l = rng.uniform(lo, hi, size=2)
        angle = float(rng.uniform(0, np.pi)) if spec.rotation else 0.0
        c, s = abs(math.cos(angle)), abs(math.sin(angle))
        ex, ey = (w * c + l * s) / 2, (w * s + l * c) / 2
        if 2 * ex >= size - 2 or 2 * ey >= size - 2:
            continue
        cx = float(rng.uniform(ex + 1, size - ex - 1))
        cy = float(rng.uniform(ey + 1, size - ey - 1))
        h = float(rng.uniform(*spec.height_range))
        b = Building(cx, cy, float(w), float(l), h, angle)
        if not spec.allow_overlap:
            footprint = rasterize(b, size)
            # one-pixel gap so neighbouring roofs stay separable
            grown = footprint.copy()
            grown[1:] |= footprint[:-1]
            grown[:-1] |= footprint[1:]
            grown[:, 1:] |= footprint[:, :-1]
            grown[:, :-1] |= footprint[:, 1:]
            if (grown & occupied).any():
                continue
            occupied |= footprint
        out.append(b)
    return out


def generate_scene(spec: SceneSpec, index: int) -> SyntheticSample:
    spec.validate()
    if index < 0:
        raise ConfigError("index", f"must be >= 0, got {index}")
    rng = np.random.default_rng([int(spec.seed), int(index)])
    buildings = _sample_buildings(spec, rng)
    return render_scene(spec, buildings, rng, meta={"seed": int(spec.seed), "index": int(index)})


# ---------------------------------------------------------------- file formats


def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed column-major RLE; counts alternate zeros/ones, zeros first."""
    flat = np.asarray(mask, dtype=np.uint8).ravel(order="F")
    if flat.size == 0:
        return {"size": list(mask.shape), "counts": []}
    change = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(edges).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(s) for s in mask.shape], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    values = np.zeros(len(rle["counts"]), dtype=np.uint8)
    values[1::2] = 1
    flat = np.repeat(values, rle["counts"])
    if flat.size != h * w:
        raise DataError(f"RLE counts sum to {flat.size}, expected {h * w}")
    return flat.reshape((h, w), order="F")


def write_height_grid(path, grid: np.ndarray) -> None:
    grid = np.ascontiguousarray(grid, dtype="<f4")
    if grid.ndim != 2:
        raise ValueError(f"height grid must be 2-D, got shape {grid.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(HEIGHT_MAGIC, grid.shape[0], grid.shape[1], 0))
        fh.write(grid.tobytes(order="C"))


def read_height_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated height grid")
    magic, rows, cols, dtype = _HEADER.unpack_from(raw)
    if magic != HEIGHT_MAGIC or dtype != 0:
        raise DataError(f"{path}: not an LGHT float32 grid")
    body = raw[_HEADER.size :]
    if len(body) != rows * cols * 4:
        raise DataError(f"{path}: expected {rows * cols * 4} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


def instances_to_json(boxes, masks, heights_m, scores=None) -> list[dict]:
    out = []
    for i in range(len(boxes)):
        rec = {
            "box": [float(v) for v in boxes[i]],
            "rle_mask": rle_encode(masks[i]),
            "height_m": float(heights_m[i]),
        }
        if scores is not None:
            rec["score"] = float(scores[i])
        out.append(rec)
    return out


def write_sample(sample: SyntheticSample, directory) -> None:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(sample.image).save(d / "image.png")
        write_height_grid(d / "height.bin", sample.height)
        recs = instances_to_json(sample.boxes, sample.masks, sample.heights_m)
        (d / "instances.json").write_text(json.dumps(recs, sort_keys=True))
    except OSError as exc:
        raise DataError(f"cannot write sample to {d}: {exc}") from exc


def read_sample(directory) -> SyntheticSample:
    d = Path(directory)
    try:
        image = np.asarray(Image.open(d / "image.png").convert("RGB"))
        height = read_height_grid(d / "height.bin")
        recs = json.loads((d / "instances.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read sample at {d}: {exc}") from exc
    h, w = height.shape
    masks = np.stack([rle_decode(r["rle_mask"]) for r in recs]) if recs else np.zeros((0, h, w), np.uint8)
    boxes = np.array([r["box"] for r in recs], dtype=np.float32).reshape(-1, 4)
    heights = np.array([r["height_m"] for r in recs], dtype=np.float32)
    meta = {"path": str(d)}
    if recs and "score" in recs[0]:
        meta["scores"] = np.array([r["score"] for r in recs], dtype=np.float32)
    return SyntheticSample(image, boxes, masks, heights, height, meta)


@dataclass
class DatasetManifest:
    spec: dict
    splits: dict[str, list[str]]
    files: dict[str, dict[str, str]]
    max_height: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def split_indices(n: int, val_fraction: float = 0.1) -> tuple[list[int], list[int]]:
    n_val = int(round(n * val_fraction))
    return list(range(n - n_val)), list(range(n - n_val, n))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(spec: SceneSpec, n: int, directory, val_fraction: float = 0.1) -> DatasetManifest:
    """Generate ``n`` scenes into ``directory`` and write ``manifest.json``."""
    spec.validate()
    if n < 0:
        raise ConfigError("n", f"must be >= 0, got {n}")
    if not 0 <= val_fraction <= 1:
        raise ConfigError("val_fraction", f"must lie in [0, 1], got {val_fraction}")
    root = Path(directory)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {root}: {exc}") from exc

    names = [f"sample_{i:06d}" for i in range(n)]
    files = {}
    for i, name in enumerate(names):
        write_sample(generate_scene(spec, i), root / name)
        files[name] = {f: _sha256(root / name / f) for f in ("image.png", "height.bin", "instances.json")}
    train, val = split_indices(n, val_fraction)
    manifest = DatasetManifest(
        spec=spec.to_dict(),
        splits={"train": [names[i] for i in train], "val": [names[i] for i in val]},
        files=files,
        max_height=spec.max_height,
    )
    try:
        (root / "manifest.json").write_text(manifest.to_json())
    except OSError as exc:
        raise DataError(f"cannot write manifest in {root}: {exc}") from exc
    return manifest


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / "manifest.json"
    try:
        d = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    return DatasetManifest(**d)


def load_split(directory, split: str) -> tuple[list[SyntheticSample], DatasetManifest]:
    manifest = read_manifest(directory)
    if split not in manifest.splits:
        raise DataError(f"split {split!r} not in manifest at {directory} (have {sorted(manifest.splits)})")
    samples = [read_sample(Path(directory) / name) for name in manifest.splits[split]]
    for name, s in zip(manifest.splits[split], samples):
        s.meta["name"] = name
    return samples, manifest
