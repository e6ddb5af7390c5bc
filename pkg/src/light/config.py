"""Training configuration and its JSON form."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import MODES, ModelConfig

SEED_ENV = "LIGHT_SEED"


@dataclass
class TrainConfig:
    mode: str = "joint+gcti"
    epochs: int = 36
    batch_size: int = 2
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_steps: int = 500
    warmup_factor: float = 0.001
    lr_decay_epochs: list[int] = field(default_factory=lambda: [24, 33])
    lr_decay: float = 0.1
    image_size: int = 512
    seed: int = 0
    loss_weights: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    grad_clip: float | None = 10.0
    augment: bool = True
    max_height: float = 100.0
    eval_every: int = 0
    model: dict = field(default_factory=dict)

    @classmethod
    def desk(cls, mode: str = "joint+gcti", seed: int = 0) -> "TrainConfig":
        """Preset sized for 128 px scenes on a single CPU core."""
        return cls(
            mode=mode,
            epochs=12,
            batch_size=2,
            lr=0.02,
            warmup_steps=200,
            lr_decay_epochs=[8, 11],
            image_size=128,
            seed=seed,
            max_height=60.0,
            model={
                "backbone": {"depth": [1, 1, 1, 1], "width": 16, "fpn_channels": 32},
                "instance": {
                    "anchor_scales": [16, 32, 64, 128],
                    "representation": 256,
                    "roi_batch": 64,
                    "rpn_batch": 128,
                    "max_det": 50,
                },
            },
        )

    def model_config(self) -> ModelConfig:
        cfg = ModelConfig.from_dict({**self.model, "mode": self.mode})
        return cfg.validate()

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if not (isinstance(self.lr, (int, float)) and self.lr >= 0 and math.isfinite(self.lr)):
            raise ConfigError("lr", f"must be finite and >= 0, got {self.lr}")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if int(self.epochs) < 0:
            raise ConfigError("epochs", f"must be >= 0, got {self.epochs}")
        if self.image_size < 64 or self.image_size % 32:
            raise ConfigError("image_size", f"must be >= 64 and divisible by 32, got {self.image_size}")
        if len(self.loss_weights) != 3 or any(not math.isfinite(w) or w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights", f"need three finite nonnegative weights, got {self.loss_weights}")
        if self.max_height <= 0:
            raise ConfigError("max_height", f"must be > 0, got {self.max_height}")
        self.model_config()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown TrainConfig field")
        return cls(**d)


def load_config(path, apply_env: bool = True) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    cfg = TrainConfig.from_dict(raw)
    if apply_env:
        cfg = with_env_seed(cfg)
    return cfg.validate()


def with_env_seed(cfg: TrainConfig) -> TrainConfig:
    value = os.environ.get(SEED_ENV)
    if value is None:
        return cfg
    try:
        seed = int(value)
    except ValueError:
        raise ConfigError(SEED_ENV, f"not an integer: {value!r}") from None
    return dataclasses.replace(cfg, seed=seed)
