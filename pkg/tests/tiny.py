"""Small dataset and network settings shared by the engine-level tests."""

from light.config import TrainConfig
from light.synthdata import SceneSpec


def tiny_spec(seed=3):
    return SceneSpec(image_size=64, n_buildings_range=(1, 3), footprint_range=(8, 24), height_range=(5.0, 40.0),
                     seed=seed, allow_overlap=False)


def tiny_config(mode="joint+gcti", **kw):
    """A network small enough to train for a couple of epochs in seconds."""
    base = dict(
        mode=mode, epochs=2, batch_size=2, warmup_steps=5, lr_decay_epochs=[10], image_size=64, max_height=40.0,
        model={
            "backbone": {"depth": [1, 1, 1, 1], "width": 4, "fpn_channels": 8},
            "instance": {"anchor_scales": [8, 16, 32, 64], "representation": 16, "roi_batch": 16, "rpn_batch": 32,
                         "rpn_pre_nms": 200, "rpn_post_nms": 50, "max_det": 20},
        },
    )
    base.update(kw)
    return TrainConfig(**base).validate()
