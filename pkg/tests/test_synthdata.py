import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from light.errors import ConfigError, DataError
from light.synthdata import (
    Building,
    SceneSpec,
    generate_scene,
    read_height_grid,
    read_manifest,
    read_sample,
    render_scene,
    rle_decode,
    rle_encode,
    write_dataset,
    write_height_grid,
)
from oracles import painter_height


def small_spec(**kw):
    base = dict(image_size=64, n_buildings_range=(1, 4), footprint_range=(6, 20), height_range=(3.0, 100.0), seed=7)
    base.update(kw)
    return SceneSpec(**base)


def test_empty_scene():
    s = generate_scene(small_spec(n_buildings_range=(0, 0)), 0)
    assert len(s) == 0
    assert s.masks.shape == (0, 64, 64)
    assert not s.height.any()


def test_single_rectangle_geometry():
    spec = SceneSpec(image_size=128)
    b = Building(cx=50.0, cy=60.0, width=40.0, length=60.0, height_m=25.0)
    s = render_scene(spec, [b])
    assert s.masks[0].sum() == 2400
    np.testing.assert_array_equal(s.boxes[0], [30, 30, 70, 90])
    assert (s.height[30:90, 30:70] == 25.0).all()
    outside = np.ones_like(s.height, dtype=bool)
    outside[30:90, 30:70] = False
    assert (s.height[outside] == 0).all()


def test_overlap_tallest_wins_matches_painter_oracle():
    spec = SceneSpec(image_size=64)
    low = Building(20.0, 20.0, 24.0, 20.0, 10.0)
    high = Building(30.0, 28.0, 20.0, 20.0, 30.0)
    s = render_scene(spec, [low, high])
    np.testing.assert_array_equal(s.height, painter_height([low, high], 64))
    assert s.height[25, 25] == 30.0
    # instances come tallest first and the lower one loses the overlap
    np.testing.assert_allclose(s.heights_m, [30.0, 10.0])
    assert not (s.masks[0] & s.masks[1]).any()


def test_rotated_scene_matches_painter_oracle():
    spec = small_spec(rotation=True, n_buildings_range=(3, 3), image_size=64)
    s = generate_scene(spec, 3)
    blds = [Building(**b) for b in s.meta["buildings"]]
    np.testing.assert_allclose(s.height, painter_height(blds, 64))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32), index=st.integers(0, 1000), rotation=st.booleans(), overlap=st.booleans())
def test_scene_invariants(seed, index, rotation, overlap):
    s = generate_scene(small_spec(seed=seed, rotation=rotation, allow_overlap=overlap), index)
    union = s.masks.any(axis=0) if len(s) else np.zeros_like(s.height, dtype=bool)
    np.testing.assert_array_equal(union, s.height > 0)
    for m, box, h in zip(s.masks, s.boxes, s.heights_m):
        assert m.any()
        ys, xs = np.nonzero(m)
        np.testing.assert_array_equal(box, [xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])
        assert (s.height[m.astype(bool)] == h).all()
    assert list(s.heights_m) == sorted(s.heights_m, reverse=True)


def test_generation_is_deterministic():
    spec = small_spec()
    a, b = generate_scene(spec, 5), generate_scene(spec, 5)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.height, b.height)
    c = generate_scene(spec, 6)
    assert not np.array_equal(a.image, c.image)


def test_brightness_monotone_in_height():
    spec = SceneSpec(image_size=64, texture_noise=0.0)
    blds = [Building(12.0, 12.0, 16.0, 16.0, 10.0), Building(40.0, 40.0, 16.0, 16.0, 60.0)]
    s = render_scene(spec, blds)
    dim = s.image[12, 12].astype(int).sum()
    bright = s.image[40, 40].astype(int).sum()
    ground = s.image[60, 2].astype(int).sum()
    assert ground < dim < bright


@pytest.mark.parametrize(
    "field,kw",
    [
        ("image_size", dict(image_size=100)),
        ("image_size", dict(image_size=32)),
        ("height_range", dict(height_range=(0.0, 10.0))),
        ("footprint_range", dict(footprint_range=(4, 64))),
        ("n_buildings_range", dict(n_buildings_range=(3, 1))),
    ],
)
def test_invalid_spec_names_field(field, kw):
    with pytest.raises(ConfigError) as err:
        generate_scene(small_spec(**kw), 0)
    assert err.value.field == field


def test_negative_index_rejected():
    with pytest.raises(ConfigError):
        generate_scene(small_spec(), -1)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=60), st.integers(1, 6))
def test_rle_round_trip(bits, rows):
    cols = max(1, len(bits) // rows)
    m = np.resize(np.array(bits, dtype=np.uint8), (rows, cols))
    rle = rle_encode(m)
    assert sum(rle["counts"]) == m.size
    np.testing.assert_array_equal(rle_decode(rle), m)


def test_rle_column_major_zeros_first():
    m = np.array([[1, 0], [1, 1]], dtype=np.uint8)
    assert rle_encode(m)["counts"] == [0, 2, 1, 1]


def test_height_grid_header(tmp_path):
    grid = np.arange(6, dtype=np.float32).reshape(2, 3) * 1.5
    path = tmp_path / "h.bin"
    write_height_grid(path, grid)
    raw = path.read_bytes()
    assert raw[:4] == b"LGHT"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [2, 3, 0]
    assert len(raw) == 16 + 6 * 4
    np.testing.assert_array_equal(read_height_grid(path), grid)


def test_height_grid_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(DataError):
        read_height_grid(path)


def test_write_dataset_empty(tmp_path):
    m = write_dataset(small_spec(), 0, tmp_path / "d")
    assert m.splits == {"train": [], "val": []}
    assert [p.name for p in (tmp_path / "d").iterdir()] == ["manifest.json"]


def test_write_dataset_round_trip(tmp_path):
    spec = small_spec()
    m = write_dataset(spec, 10, tmp_path / "d")
    assert len(m.splits["train"]) == 9 and len(m.splits["val"]) == 1
    assert read_manifest(tmp_path / "d") == m
    for i, name in enumerate(m.splits["train"] + m.splits["val"]):
        s = read_sample(tmp_path / "d" / name)
        ref = generate_scene(spec, i)
        np.testing.assert_array_equal(s.image, ref.image)
        np.testing.assert_array_equal(s.height, ref.height)
        np.testing.assert_array_equal(s.masks, ref.masks)
        np.testing.assert_array_equal(s.boxes, ref.boxes)
    rec = json.loads((tmp_path / "d" / "sample_000000" / "instances.json").read_text())
    assert set(rec[0]) == {"box", "rle_mask", "height_m"}


def test_write_dataset_byte_identical_rerun(tmp_path):
    spec = small_spec()
    write_dataset(spec, 4, tmp_path / "a")
    write_dataset(spec, 4, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_write_dataset_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError) as err:
        write_dataset(small_spec(), 1, blocker / "sub")
    assert str(blocker) in str(err.value)
