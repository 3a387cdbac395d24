import math

import numpy as np
import pytest

from owlst.evaluation import (
    Bucket,
    Detection,
    EvalTask,
    GroundTruth,
    PRCurve,
    aggregate_datasets,
    ap_fixed,
    ap_old,
    average_precision,
    evaluate,
    lvis_buckets,
    match_and_score,
    read_detections_jsonl,
    write_detections_jsonl,
)
from owlst.types import Box

A = Box(0.0, 0.0, 0.5, 0.5)
B = Box(0.5, 0.5, 1.0, 1.0)


def test_perfect_and_empty():
    task = EvalTask([GroundTruth("i", "x", A)], [Detection("i", "x", A, 0.9)])
    assert ap_fixed(task).ap_all == 1.0
    assert ap_fixed(EvalTask([GroundTruth("i", "x", A)], [])).ap_all == 0.0


def test_hand_computed_ap():
    # Two GT; detections ranked TP, FP, TP: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
    gts = [GroundTruth("i", "x", A), GroundTruth("j", "x", A)]
    dets = [Detection("i", "x", A, 0.9), Detection("i", "x", B, 0.8), Detection("j", "x", A, 0.7)]
    curve = match_and_score(EvalTask(gts, dets), "x")
    assert curve.tp.tolist() == [True, False, True]
    expected = (51 * 1.0 + 50 * (2 / 3)) / 101
    assert average_precision(curve) == pytest.approx(expected, abs=1e-12)


def test_duplicate_detection_is_false_positive():
    gts = [GroundTruth("i", "x", A)]
    dets = [Detection("i", "x", A, 0.9), Detection("i", "x", A, 0.8)]
    assert match_and_score(EvalTask(gts, dets), "x").tp.tolist() == [True, False]


def test_exact_recall_grid_points():
    # 7 of 20 GT found with perfect precision: recall 0.35 must count at the 0.35 point.
    gts = [GroundTruth(f"i{k}", "x", A) for k in range(20)]
    dets = [Detection(f"i{k}", "x", A, 0.9) for k in range(7)]
    assert average_precision(match_and_score(EvalTask(gts, dets), "x")) == pytest.approx(36 / 101, abs=1e-12)


def test_iou_threshold_boundary_is_inclusive():
    gt = Box(0.0, 0.0, 0.5, 0.5)
    half = Box(0.0, 0.0, 0.5, 0.25)  # IoU exactly 0.5
    assert match_and_score(EvalTask([GroundTruth("i", "x", gt)], [Detection("i", "x", half, 0.5)]), "x").tp.tolist() == [True]


def test_zero_gt_classes_excluded_and_buckets():
    gts = [GroundTruth("i", "x", A), GroundTruth("i", "y", B)]
    dets = [Detection("i", "x", A, 0.9), Detection("i", "z", B, 0.9)]
    res = ap_fixed(EvalTask(gts, dets, {"x": "rare", "y": "frequent", "z": "common"}))
    assert set(res.per_class_ap) == {"x", "y"}
    assert res.ap_all == 0.5 and res.ap_rare == 1.0 and res.ap_frequent == 0.0
    assert math.isnan(res.ap_common)
    assert [r[0] for r in res.to_rows()] == ["all", "rare", "common", "frequent"]


def test_catalog_check():
    with pytest.raises(ValueError):
        EvalTask([GroundTruth("i", "x", A)], [Detection("i", "q", A, 0.5)], {"x": "rare"})
    EvalTask([GroundTruth("i", "x", A)], [Detection("i", "q", A, 0.5)], {"x": "rare"}, allow_unknown_classes=True)


def test_caps():
    gts = [GroundTruth("i", "x", A)]
    dets = [Detection("i", "x", B, 0.9), Detection("i", "x", A, 0.1)]
    assert ap_fixed(EvalTask(gts, dets), max_dets_per_class=1).ap_all == 0.0
    assert ap_old(EvalTask(gts, dets), max_dets_per_image=1).ap_all == 0.0
    assert evaluate(EvalTask(gts, dets), "old").ap_all == ap_fixed(EvalTask(gts, dets)).ap_all == 0.5


def test_nan_without_gt():
    assert math.isnan(average_precision(PRCurve(np.zeros(2, bool), 0)))


def test_buckets_and_aggregation():
    b = lvis_buckets({"a": 1, "b": 10, "c": 11, "d": 100, "e": 101})
    assert [b[k] for k in "abcde"] == [Bucket.RARE, Bucket.RARE, Bucket.COMMON, Bucket.COMMON, Bucket.FREQUENT]
    assert aggregate_datasets([0.1, 0.2, 0.6]) == (pytest.approx(0.3), 0.2)
    with pytest.raises(ValueError):
        aggregate_datasets([])


def test_jsonl_round_trip(tmp_path):
    dets = [Detection("i", "x", A, 0.25), Detection("j", "y z", B, 1.0)]
    write_detections_jsonl(dets, tmp_path / "d.jsonl")
    assert read_detections_jsonl(tmp_path / "d.jsonl") == dets
