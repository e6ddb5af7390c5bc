import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from light.metrics import (
    IOU_THRESHOLDS,
    MetricsReport,
    ap_per_threshold,
    average_precision,
    delta_accuracy,
    evaluate_split,
    greedy_match,
    interpolated_ap,
    map_metric,
    mask_iou,
    mask_iou_matrix,
)
from cases import ap_case, as_instances, rand_rect, rect
from oracles import brute_force_ap, delta_loop

# ---------------------------------------------------------------- AP oracle


@pytest.mark.parametrize("seed", range(50))
def test_ap_matches_brute_force(seed):
    preds, gts = ap_case(seed)
    pred_sets = [as_instances([m for _, m in p], [s for s, _ in p]) for p in preds]
    gt_sets = [as_instances(g) for g in gts]
    table = ap_per_threshold(pred_sets, gt_sets)
    for t in IOU_THRESHOLDS:
        ref = brute_force_ap(preds, gts, float(t))
        got = table[float(t)]
        if ref is None:
            assert got is None
        else:
            assert abs(got - ref) < 1e-12, (t, got, ref)


def test_thresholds():
    assert IOU_THRESHOLDS.tolist() == [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]


def test_perfect_predictions():
    g = [rect(0, 0, 4, 4), rect(6, 6, 12, 10)]
    m, ap50 = map_metric([as_instances(g, [0.9, 0.8])], [as_instances(g)])
    assert m == 100.0 and ap50 == 100.0


def test_no_predictions_zero():
    assert average_precision([as_instances([], [])], [as_instances([rect(0, 0, 3, 3)])], 0.5) == 0.0


def test_no_gt_undefined():
    assert map_metric([as_instances([rect(0, 0, 3, 3)], [0.5])], [as_instances([])]) == (None, None)


def test_single_false_positive_ranked_first():
    g = rect(0, 0, 4, 4)
    preds = as_instances([rect(8, 8, 12, 12), g], [0.9, 0.8])
    # recall 1 reached at precision 1/2
    assert average_precision([preds], [as_instances([g])], 0.5) == pytest.approx(0.5)


def test_greedy_match_takes_best_unmatched():
    iou = np.array([[0.6, 0.8], [0.0, 0.7], [0.9, 0.0]])
    # row 0 claims GT 1, leaving row 1 only GT 0 at IoU 0
    assert greedy_match(iou, 0.5).tolist() == [True, False, True]
    assert greedy_match(iou, 0.85).tolist() == [False, False, True]


def test_interpolated_envelope():
    # two TPs around one FP, two GT
    ap = interpolated_ap(np.array([True, False, True]), np.array([0.9, 0.8, 0.7]), 2)
    expect = (51 * 1.0 + 50 * (2 / 3)) / 101
    assert ap == pytest.approx(expect)


# ---------------------------------------------------------------- IoU


def test_mask_iou_empty_pair_warns():
    z = np.zeros((4, 4))
    with pytest.warns(RuntimeWarning):
        assert mask_iou(z, z) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mask_iou_properties(seed):
    rng = np.random.default_rng(seed)
    a, b = rand_rect(rng), rand_rect(rng)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        v = mask_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == mask_iou(b, a)
    assert mask_iou(a, a) == 1.0
    assert mask_iou_matrix(a[None], b[None])[0, 0] == pytest.approx(v)


# ---------------------------------------------------------------- delta


@pytest.mark.parametrize("seed", range(50))
def test_delta_matches_loop(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 60, (6, 7)) * (rng.uniform(size=(6, 7)) < 0.6)
    pred = gt * rng.uniform(0.6, 1.6, gt.shape) + rng.normal(0, 2, gt.shape)
    for k in (1, 2, 3):
        assert delta_accuracy(pred, gt, k) == delta_loop(pred, gt, k)


def test_delta_perfect_and_undefined():
    gt = np.array([[0.0, 5.0], [10.0, 0.5]])
    assert delta_accuracy(gt, gt, 1) == 100.0
    assert delta_accuracy(gt, np.zeros_like(gt), 1) is None


def test_delta_floor_and_ratio_boundaries():
    gt = np.array([10.0, 10.0, 10.0, 2.0])
    pred = np.array([12.4, 12.5, 8.1, -3.0])
    # 12.5 / 10 == 1.25 is not strictly below; -3 is floored to 0.1
    assert delta_accuracy(pred, gt, 1) == pytest.approx(50.0)
    assert delta_accuracy(pred, gt, 3) == pytest.approx(75.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_delta_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 50, 40)
    pred = rng.uniform(0, 50, 40)
    vals = [delta_accuracy(pred, gt, k) for k in (1, 2, 3)]
    if vals[0] is not None:
        assert 0 <= vals[0] <= vals[1] <= vals[2] <= 100


def test_delta_rejects_bad_k():
    with pytest.raises(ValueError):
        delta_accuracy(np.ones(2), np.ones(2) * 5, 4)


# ---------------------------------------------------------------- report


def test_evaluate_split_pools_pixels_over_images():
    gts = [np.full((2, 2), 10.0), np.full((2, 6), 10.0)]
    preds = [np.full((2, 2), 10.0), np.full((2, 6), 30.0)]
    r = evaluate_split(pred_heights=preds, gt_heights=gts)
    assert r.delta1 == pytest.approx(100 * 4 / 16)
    assert r.mAP is None and r.n_images == 2


def test_report_json_round_trip():
    preds, gts = ap_case(3)
    pred_sets = [as_instances([m for _, m in p], [s for s, _ in p]) for p in preds]
    gt_sets = [as_instances(g) for g in gts]
    r = evaluate_split(pred_sets, gt_sets)
    d = json.loads(json.dumps(r.to_dict()))
    assert set(d) == {f.name for f in MetricsReport.__dataclass_fields__.values()}
    assert list(d["ap_per_threshold"]) == [f"{t:.2f}" for t in IOU_THRESHOLDS]
    assert d["n_gt"] == sum(len(g) for g in gts)
    if r.AP50 is not None:
        assert d["ap_per_threshold"]["0.50"] == pytest.approx(r.AP50)


def test_single_exact_prediction():
    g = rect(2, 2, 7, 9)
    assert average_precision([as_instances([g], [0.3])], [as_instances([g])], 0.5) == 1.0


def test_iou_sixty_percent_counts_three_thresholds():
    # 10x10 GT, 10x6 prediction inside it: IoU exactly 0.6
    g = rect(1, 1, 11, 11)
    p = rect(1, 1, 7, 11)
    m, ap50 = map_metric([as_instances([p], [0.9])], [as_instances([g])])
    assert ap50 == 100.0
    assert m == pytest.approx(30.0)


def test_double_height_fails_every_delta():
    gt = np.random.default_rng(0).uniform(2, 50, (8, 8))
    assert [delta_accuracy(2 * gt, gt, k) for k in (1, 2, 3)] == [0.0, 0.0, 0.0]


@pytest.mark.parametrize("seed", range(10))
def test_ap_invariant_to_monotone_score_rescaling(seed):
    preds, gts = ap_case(seed)
    gt_sets = [as_instances(g) for g in gts]
    a = [as_instances([m for _, m in p], [s for s, _ in p]) for p in preds]
    b = [as_instances([m for _, m in p], [np.exp(3 * s) - 0.5 for s, _ in p]) for p in preds]
    assert ap_per_threshold(a, gt_sets) == ap_per_threshold(b, gt_sets)


@pytest.mark.parametrize("seed", range(20))
def test_ap_non_increasing_in_threshold(seed):
    preds, gts = ap_case(seed)
    table = ap_per_threshold([as_instances([m for _, m in p], [s for s, _ in p]) for p in preds],
                             [as_instances(g) for g in gts])
    vals = list(table.values())
    if vals[0] is not None:
        assert all(x >= y - 1e-12 for x, y in zip(vals, vals[1:]))
        m, ap50 = map_metric([as_instances([m for _, m in p], [s for s, _ in p]) for p in preds],
                             [as_instances(g) for g in gts])
        assert m <= ap50 + 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_mask_iou_pixel_count_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(16, 16)) < 0.4
    b = rng.uniform(size=(16, 16)) < 0.4
    inter = union = 0
    for r in range(16):
        for c in range(16):
            inter += a[r, c] and b[r, c]
            union += a[r, c] or b[r, c]
    assert mask_iou(a, b) == inter / union
