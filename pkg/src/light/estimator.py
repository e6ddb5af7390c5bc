"""scikit-learn style wrapper around the network and its training recipe."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .errors import ConfigError, NumericalError
from .height import denormalize
from .instance import InstanceSet
from .losses import LossWeights, total_loss
from .metrics import MetricsReport, evaluate_split
from .model import LightNet
from .validation import check_images, check_size, check_targets, flip_batch, resize_images

log = logging.getLogger(__name__)


@dataclass
class Prediction:
    instances: InstanceSet | None
    height_m: np.ndarray | None


def lr_factor(step: int, epoch: int, cfg: TrainConfig) -> float:
    warm = 1.0
    if step < cfg.warmup_steps:
        alpha = step / cfg.warmup_steps
        warm = cfg.warmup_factor * (1 - alpha) + alpha
    decays = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return warm * cfg.lr_decay**decays


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.SGD:
    """Plain SGD with momentum; weight decay is added to the gradient before the momentum buffer."""
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


class LightEstimator(BaseEstimator):
    """Joint building instance segmentation and height regression.

    ``fit`` takes images ``(N, H, W, 3)`` and one ground-truth record per
    image; ``predict`` returns a :class:`Prediction` per image with heights in
    meters. Constructor arguments mirror :class:`TrainConfig`.
    """

    def __init__(self, mode="joint+gcti", epochs=36, batch_size=2, lr=0.02, momentum=0.9, weight_decay=1e-4,
                 warmup_steps=500, warmup_factor=0.001, lr_decay_epochs=(24, 33), lr_decay=0.1, image_size=512,
                 seed=0, loss_weights=(1.0, 1.0, 1.0), grad_clip=10.0, augment=True, max_height=100.0,
                 eval_every=0, model=None):
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.warmup_factor = warmup_factor
        self.lr_decay_epochs = lr_decay_epochs
        self.lr_decay = lr_decay
        self.image_size = image_size
        self.seed = seed
        self.loss_weights = loss_weights
        self.grad_clip = grad_clip
        self.augment = augment
        self.max_height = max_height
        self.eval_every = eval_every
        self.model = model

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "LightEstimator":
        return cls(**cfg.to_dict())

    def config(self) -> TrainConfig:
        params = self.get_params()
        params["lr_decay_epochs"] = list(params["lr_decay_epochs"])
        params["loss_weights"] = list(params["loss_weights"])
        params["model"] = dict(params["model"] or {})
        return TrainConfig(**params).validate()

    # ------------------------------------------------------------ training

    def _init_network(self, cfg: TrainConfig) -> LightNet:
        torch.manual_seed(cfg.seed)
        return LightNet(cfg.model_config())

    def fit(self, X, y, X_val=None, y_val=None, callback=None):
        """Train from scratch with SGD; returns ``self``.

        ``callback(estimator, epoch)`` runs after every epoch and may raise to
        stop training. Raises :class:`NumericalError` on a non-finite loss,
        leaving the last good state in ``last_good_state_``.
        """
        cfg = self.config()
        images = resize_images(check_images(X), cfg.image_size)
        check_size(images)
        targets = check_targets(y, len(images), cfg.image_size, cfg.max_height)

        net = self._init_network(cfg)
        self.network_ = net
        self.optimizer_ = make_optimizer(net.parameters(), cfg)
        self.loss_history_ = []
        self.val_history_ = []
        self.epoch_ = 0
        self.last_good_state_ = self._state_bytes()
        rng = np.random.default_rng(cfg.seed)
        gen = torch.Generator().manual_seed(cfg.seed)
        weights = LossWeights(*cfg.loss_weights).validate()

        n = len(images)
        steps = math.ceil(n / cfg.batch_size) if n else 0
        step = 0
        for epoch in range(cfg.epochs):
            net.train()
            order = rng.permutation(n)
            for s in range(steps):
                idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
                batch = images[idx]
                tgts = [targets[i] for i in idx]
                if cfg.augment:
                    hflip, vflip = rng.random(2) < 0.5
                    batch, tgts = flip_batch(batch, tgts, bool(hflip), bool(vflip))
                for group in self.optimizer_.param_groups:
                    group["lr"] = cfg.lr * lr_factor(step, epoch, cfg)
                parts = net.forward_train(batch, tgts, gen)
                try:
                    report = total_loss(parts["det"], parts["mask"], parts["height"], weights)
                except NumericalError as exc:
                    log.error("epoch %d step %d: %s", epoch, step, exc)
                    raise
                self.optimizer_.zero_grad(set_to_none=True)
                report.total.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
                self.optimizer_.step()
                rec = {"epoch": epoch, "step": step, "lr": self.optimizer_.param_groups[0]["lr"],
                       **report.as_floats()}
                self.loss_history_.append(rec)
                if step % 50 == 0:
                    log.info("epoch %d step %d total %.4f (det %.4f mask %.4f height %.4f)", epoch, step,
                             rec["total"], rec["det"], rec["mask"], rec["height"])
                step += 1
            self.epoch_ = epoch + 1
            self.last_good_state_ = self._state_bytes()
            if X_val is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                self.val_history_.append({"epoch": epoch + 1, **self.evaluate(X_val, y_val).to_dict()})
            if callback is not None:
                callback(self, epoch)
        return self

    def _state_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(self.network_.state_dict(), buf)
        return buf.getvalue()

    # ------------------------------------------------------------ inference

    def predict(self, X, batch_size: int = 4) -> list[Prediction]:
        check_is_fitted(self, "network_")
        cfg = self.config()
        images = check_images(X)
        orig = tuple(images.shape[-2:])
        images = resize_images(images, cfg.image_size)
        net = self.network_
        net.eval()
        out = []
        for s in range(0, len(images), batch_size):
            inst, heights = net.predict(images[s : s + batch_size])
            for i in range(len(images[s : s + batch_size])):
                h = None
                if heights is not None:
                    h = heights[i : i + 1, None]
                    if tuple(h.shape[-2:]) != orig:
                        h = torch.nn.functional.interpolate(h, size=orig, mode="bilinear", align_corners=False)
                    h = denormalize(h[0, 0].double().numpy(), cfg.max_height).astype(np.float32)
                pi = inst[i] if inst is not None else None
                if pi is not None and orig != (cfg.image_size, cfg.image_size):
                    pi = _rescale_instances(pi, cfg.image_size, orig)
                out.append(Prediction(pi, h))
        return out

    def evaluate(self, X, y, predictions: list[Prediction] | None = None) -> MetricsReport:
        preds = predictions if predictions is not None else self.predict(X)
        seg = preds[0].instances is not None if preds else self.mode != "height_only"
        hgt = preds[0].height_m is not None if preds else self.mode != "seg_only"
        gt_inst = [_as_instance_set(t) for t in y]
        return evaluate_split(
            [p.instances for p in preds] if seg else None,
            gt_inst,
            [p.height_m for p in preds] if hgt else None,
            [np.asarray(t.height if hasattr(t, "height") else t["height"]) for t in y],
        )

    def score(self, X, y) -> float:
        """Mean of the available headline metrics (AP50, delta1) as a fraction."""
        r = self.evaluate(X, y)
        vals = [v for v in (r.AP50, r.delta1) if v is not None]
        return float(np.mean(vals)) / 100.0 if vals else float("nan")

    # ------------------------------------------------------------ persistence

    def checkpoint(self, metrics: dict | None = None) -> dict:
        check_is_fitted(self, "network_")
        return {
            "format": "light-checkpoint-1",
            "config": self.config().to_dict(),
            "model": self.network_.state_dict(),
            "optimizer": self.optimizer_.state_dict() if getattr(self, "optimizer_", None) else None,
            "epoch": int(getattr(self, "epoch_", 0)),
            "metrics": metrics or {},
        }

    def save(self, path, metrics: dict | None = None) -> None:
        # via a buffer: torch.save names the zip archive after the file, which would tie bytes to the path
        buf = io.BytesIO()
        torch.save(self.checkpoint(metrics), buf)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "LightEstimator":
        try:
            ckpt = torch.load(path, map_location="cpu", weights_only=False)
        except (OSError, RuntimeError) as exc:
            from .errors import DataError

            raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
        if not isinstance(ckpt, dict) or ckpt.get("format") != "light-checkpoint-1":
            raise ConfigError("checkpoint", f"{path} is not a LIGHT checkpoint")
        est = cls.from_config(TrainConfig.from_dict(ckpt["config"]))
        cfg = est.config()
        net = LightNet(cfg.model_config())
        net.load_state_dict(ckpt["model"])
        est.network_ = net
        est.optimizer_ = make_optimizer(net.parameters(), cfg)
        if ckpt.get("optimizer"):
            est.optimizer_.load_state_dict(ckpt["optimizer"])
        est.epoch_ = ckpt.get("epoch", 0)
        est.metrics_ = ckpt.get("metrics", {})
        return est


def _as_instance_set(t) -> InstanceSet:
    if isinstance(t, InstanceSet):
        return t
    if isinstance(t, dict):
        return InstanceSet(np.asarray(t["boxes"], np.float32), np.asarray(t["masks"], np.uint8), t.get("scores"))
    return InstanceSet(t.boxes, t.masks, t.meta.get("scores"))


def _rescale_instances(pi: InstanceSet, size: int, orig: tuple[int, int]) -> InstanceSet:
    h, w = orig
    boxes = pi.boxes * np.array([w / size, h / size, w / size, h / size], dtype=np.float32)
    masks = np.stack([_resize_nearest_hw(m, orig) for m in pi.masks]) if len(pi) else np.zeros((0, h, w), np.uint8)
    return InstanceSet(boxes, masks, pi.scores)


def _resize_nearest_hw(m: np.ndarray, orig: tuple[int, int]) -> np.ndarray:
    t = torch.from_numpy(m.astype(np.float32))[None, None]
    return torch.nn.functional.interpolate(t, size=orig, mode="nearest")[0, 0].numpy().astype(np.uint8)
