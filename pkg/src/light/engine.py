"""File-level orchestration: train, evaluate, infer and bench."""

from __future__ import annotations

import dataclasses
import json
import logging
import statistics
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import TrainConfig
from .errors import DataError, NumericalError
from .estimator import LightEstimator, Prediction
from .instance import InstanceSet
from .metrics import MetricsReport
from .model import MODES, LightNet
from .synthdata import (
    DatasetManifest,
    SceneSpec,
    generate_scene,
    instances_to_json,
    load_split,
    read_height_grid,
    read_sample,
    write_height_grid,
)
from .viz import height_overlay, instance_overlay

log = logging.getLogger(__name__)


def _images(samples) -> np.ndarray:
    if not samples:
        raise DataError("split is empty")
    return np.stack([s.image for s in samples])


def _score(report: MetricsReport) -> float:
    vals = [v for v in (report.AP50, report.delta1) if v is not None]
    return float(np.mean(vals)) if vals else float("-inf")


def train(cfg: TrainConfig, data_dir, out_dir) -> tuple[LightEstimator, MetricsReport]:
    """Train on the ``train`` split, evaluate on ``val``, write checkpoints and logs.

    ``out_dir`` receives ``best.ckpt``, ``last.ckpt``, ``train_log.jsonl``,
    ``config.json`` and ``metrics.json``.
    """
    train_set, manifest = load_split(data_dir, "train")
    val_set, _ = load_split(data_dir, "val")
    cfg = dataclasses.replace(cfg, max_height=float(manifest.max_height)).validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))

    est = LightEstimator.from_config(cfg)
    X_val = _images(val_set) if val_set else None
    best = {"score": float("-inf")}

    def on_epoch(e: LightEstimator, epoch: int):
        if X_val is None or not cfg.eval_every or (epoch + 1) % cfg.eval_every:
            return
        report = e.evaluate(X_val, val_set)
        if _score(report) > best["score"]:
            best["score"] = _score(report)
            e.save(out / "best.ckpt", report.to_dict())

    try:
        est.fit(_images(train_set), train_set, callback=on_epoch)
    except NumericalError:
        if hasattr(est, "last_good_state_"):
            (out / "last_good.ckpt").write_bytes(est.last_good_state_)
        _write_log(out, getattr(est, "loss_history_", []))
        raise
    _write_log(out, est.loss_history_)

    report = est.evaluate(X_val, val_set) if X_val is not None else MetricsReport()
    est.save(out / "last.ckpt", report.to_dict())
    if not (out / "best.ckpt").exists() or _score(report) >= best["score"]:
        est.save(out / "best.ckpt", report.to_dict())
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return est, report


def _write_log(out: Path, history: list[dict]) -> None:
    with open(out / "train_log.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def evaluate(ckpt, data_dir, split: str = "val") -> tuple[MetricsReport, dict]:
    """Metrics of a checkpoint on a dataset split plus report metadata."""
    est = LightEstimator.load(ckpt)
    samples, manifest = load_split(data_dir, split)
    report = est.evaluate(_images(samples), samples)
    return report, _report_meta(est.config(), manifest, split)


def evaluate_predictions(pred_dir, data_dir, split: str = "val", mode: str = "joint+gcti") -> MetricsReport:
    """Score stored prediction files (one directory per sample name) against ground truth."""
    samples, _ = load_split(data_dir, split)
    preds = []
    for s in samples:
        d = Path(pred_dir) / s.meta["name"]
        if not d.is_dir():
            raise DataError(f"no prediction directory for {s.meta['name']} under {pred_dir}")
        preds.append(load_prediction(d))
    est = LightEstimator(mode=mode)
    if mode == "seg_only":
        preds = [Prediction(p.instances, None) for p in preds]
    elif mode == "height_only":
        preds = [Prediction(None, p.height_m) for p in preds]
    return est.evaluate(None, samples, predictions=preds)


def load_prediction(directory) -> Prediction:
    s = read_sample(directory)
    scores = s.meta.get("scores")
    if scores is None:
        scores = np.ones(len(s), np.float32)
    return Prediction(InstanceSet(s.boxes, s.masks, scores), s.height)


def _report_meta(cfg: TrainConfig, manifest: DatasetManifest, split: str) -> dict:
    return {"config": cfg.to_dict(), "dataset_hash": manifest.digest(), "split": split}


def write_report(path, report: MetricsReport, meta: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({**report.to_dict(), **meta}, indent=1, sort_keys=True))


def _read_image(path) -> np.ndarray:
    try:
        return np.asarray(Image.open(path).convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def infer(ckpt, image_path, out_dir) -> Path:
    """Predict one image; writes a one-sample dataset directory plus overlays.

    The result can be fed back to ``evaluate`` (split ``val``) or to
    ``evaluate_predictions``.
    """
    est = LightEstimator.load(ckpt)
    cfg = est.config()
    image = _read_image(image_path)
    if image.shape[:2] != (cfg.image_size, cfg.image_size):
        t = torch.from_numpy(image.astype(np.float32) / 255).permute(2, 0, 1)[None]
        t = torch.nn.functional.interpolate(t, size=(cfg.image_size,) * 2, mode="bilinear", align_corners=False)
        image = (t[0].permute(1, 2, 0).clamp(0, 1).numpy() * 255).round().astype(np.uint8)
    pred = est.predict(image[None])[0]
    size = image.shape[:2]
    inst = pred.instances if pred.instances is not None else InstanceSet.empty(size)
    height = pred.height_m if pred.height_m is not None else np.zeros(size, np.float32)

    name = Path(image_path).stem
    out = Path(out_dir)
    d = out / name
    try:
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(image).save(d / "image.png")
        write_height_grid(d / "height.bin", height)
        h_inst = [float(np.median(height[m.astype(bool)])) if m.any() else 0.0 for m in inst.masks]
        recs = instances_to_json(inst.boxes, inst.masks, h_inst, inst.scores)
        (d / "instances.json").write_text(json.dumps(recs, sort_keys=True))
        instance_overlay(image, inst).save(d / "overlay_instances.png")
        height_overlay(height, cfg.max_height).save(d / "overlay_height.png")
        manifest = DatasetManifest(spec={}, splits={"train": [], "val": [name]}, files={}, max_height=cfg.max_height)
        (out / "manifest.json").write_text(manifest.to_json())
    except OSError as exc:
        raise DataError(f"cannot write predictions to {out}: {exc}") from exc
    return d


def _time_forward(nets: dict[str, LightNet], images: torch.Tensor, n: int, warmup: int = 5) -> dict[str, list[float]]:
    """Per-mode latencies in ms, interleaved image by image.

    Modes are timed round-robin with a rotating order so that clock drift and
    cache state affect every mode alike.
    """
    names = list(nets)
    for net in nets.values():
        net.eval()
        for i in range(warmup):
            net.predict(images[i % len(images)][None])
    times = {m: [] for m in names}
    for i in range(n):
        x = images[i % len(images)][None]
        for j in range(len(names)):
            m = names[(i + j) % len(names)]
            t0 = time.perf_counter()
            nets[m].predict(x)
            times[m].append((time.perf_counter() - t0) * 1000.0)
    return times


def bench(ckpt, n_images: int = 50, warmup: int = 5) -> dict:
    """Per-image forward latency of the checkpoint's architecture in every mode.

    Weights shared with the checkpoint are loaded into each mode's network so
    that detection workloads are comparable.
    """
    est = LightEstimator.load(ckpt)
    cfg = est.config()
    state = est.network_.state_dict()
    spec = SceneSpec.desk(seed=12345)
    spec.image_size = cfg.image_size
    spec.footprint_range = (min(spec.footprint_range[0], cfg.image_size // 4), min(40, cfg.image_size // 2))
    n_images = max(int(n_images), 1)
    images = torch.stack([
        torch.from_numpy(generate_scene(spec, i).image.astype(np.float32) / 255).permute(2, 0, 1)
        for i in range(min(n_images, 10))
    ])
    nets = {}
    for mode in MODES:
        torch.manual_seed(cfg.seed)
        net = LightNet(dataclasses.replace(cfg, mode=mode).model_config())
        own = net.state_dict()
        net.load_state_dict({k: v for k, v in state.items() if k in own and own[k].shape == v.shape}, strict=False)
        nets[mode] = net
    modes = {m: {"mean_ms": statistics.fmean(t), "median_ms": statistics.median(t), "n": len(t)}
             for m, t in _time_forward(nets, images, n_images, warmup).items()}
    single = modes["seg_only"]["mean_ms"] + modes["height_only"]["mean_ms"]
    return {
        "image_size": cfg.image_size,
        "n": n_images,
        "warmup": warmup,
        "modes": modes,
        "single_task_sum_ms": single,
        "joint_over_single_sum": modes["joint"]["mean_ms"] / single,
        "joint_gcti_over_single_sum": modes["joint+gcti"]["mean_ms"] / single,
    }


BENCH_FIELDS = {"image_size", "n", "warmup", "modes", "single_task_sum_ms", "joint_over_single_sum",
                "joint_gcti_over_single_sum"}
