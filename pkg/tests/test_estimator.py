import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from light.errors import ConfigError, ShapeError
from light.estimator import LightEstimator
from light.synthdata import generate_scene
from tiny import tiny_config, tiny_spec


def test_get_set_params_and_clone():
    est = LightEstimator(mode="joint", epochs=3, seed=5)
    params = est.get_params()
    assert params["mode"] == "joint" and params["epochs"] == 3 and params["seed"] == 5
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(lr=0.01)
    assert est.config().lr == 0.01


def test_from_config_round_trip():
    cfg = tiny_config(seed=9)
    assert LightEstimator.from_config(cfg).config() == cfg


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        LightEstimator().predict(np.zeros((1, 64, 64, 3), np.uint8))


def test_bad_mode_rejected_at_fit():
    with pytest.raises(ConfigError):
        LightEstimator(mode="both").fit(np.zeros((1, 64, 64, 3), np.uint8), [])


def test_image_validation():
    est = LightEstimator.from_config(tiny_config())
    with pytest.raises(ShapeError):
        est.fit(np.zeros((2, 64, 64), np.uint8), [])
    with pytest.raises(ShapeError):
        est.fit(np.full((1, 64, 64, 3), 2.0), [{}])
    with pytest.raises(ShapeError):
        est.fit(np.zeros((2, 64, 64, 3), np.uint8), [generate_scene(tiny_spec(), 0)])


def test_fit_predict_shapes_and_original_resolution():
    samples = [generate_scene(tiny_spec(), i) for i in range(4)]
    X = np.stack([s.image for s in samples])
    est = LightEstimator.from_config(tiny_config(epochs=1)).fit(X, samples)
    assert est.epoch_ == 1 and len(est.loss_history_) == 2
    big = np.repeat(np.repeat(X[:1], 2, axis=1), 2, axis=2)
    (p,) = est.predict(big)
    assert p.height_m.shape == (128, 128)
    assert p.instances.masks.shape[1:] == (128, 128)
    assert (p.height_m >= 0).all() and (p.height_m <= est.max_height).all()
    s = est.score(X, samples)
    assert 0.0 <= s <= 1.0
