import numpy as np
import pandas as pd
import pytest

from modules.evaluation import (
    Detection,
    EvalReport,
    average_precision,
    evaluate_detections,
    interpolated_ap,
    match_detections,
)
from modules.geometry import Box3D, rotated_iou_bev

CAR = Box3D(5.0, 0.0, -0.4, 2.0, 4.2, 1.8)
OTHER = Box3D(12.0, 2.0, -0.4, 2.0, 4.2, 1.8)
MISS = Box3D(30.0, 5.0, -0.4, 2.0, 4.2, 1.8)


def test_perfect_detections_give_full_ap():
    dets = [("a", Detection(CAR, 0.9)), ("b", Detection(OTHER, 0.8))]
    gts = {"a": [CAR], "b": [OTHER]}
    assert average_precision(dets, gts, rotated_iou_bev, 0.5) == pytest.approx(1.0)


def test_no_detections_give_zero_ap():
    assert average_precision([], {"a": [CAR]}, rotated_iou_bev, 0.5) == 0.0


def test_no_ground_truth_gives_zero_ap():
    assert average_precision([("a", Detection(CAR, 0.9))], {"a": []}, rotated_iou_bev, 0.5) == 0.0


def test_confident_false_positive_halves_precision():
    dets = [("a", Detection(MISS, 0.9)), ("a", Detection(CAR, 0.5))]
    assert average_precision(dets, {"a": [CAR]}, rotated_iou_bev, 0.5) == pytest.approx(0.5)


def test_duplicate_detection_is_false_positive():
    dets = [("a", Detection(CAR, 0.9)), ("a", Detection(CAR, 0.8))]
    assert match_detections(dets, {"a": [CAR]}, rotated_iou_bev, 0.5).tolist() == [True, False]


def test_detection_matches_only_its_own_scene():
    dets = [("b", Detection(CAR, 0.9))]
    assert match_detections(dets, {"a": [CAR], "b": []}, rotated_iou_bev, 0.5).tolist() == [False]


def test_interpolated_ap_partial_recall():
    # one of two objects found at full precision
    assert interpolated_ap(np.array([True]), 2, num_points=40) == pytest.approx(0.5)


def test_report_has_categories_and_total():
    predictions = {0: [Detection(CAR, 0.9)], 1: []}
    ground_truth = {0: [CAR], 1: [OTHER]}
    report = evaluate_detections(predictions, ground_truth, {0: "normal", 1: "fog"}, (0.3, 0.5),
                                 category_order=("normal", "fog"))
    frame = report.to_frame()
    assert list(dict.fromkeys(frame["category"])) == ["normal", "fog", "total"]
    assert len(frame) == 3 * 2 * 2
    assert report.get("normal", "bev", 0.5) == pytest.approx(1.0)
    assert report.get("fog", "3d", 0.3) == 0.0
    assert report.get("total", "bev", 0.5) == pytest.approx(0.5)
    with pytest.raises(KeyError):
        report.get("snow", "bev", 0.5)


def test_report_table_and_csv(tmp_path):
    report = EvalReport()
    report.add("normal", "bev", 0.5, 0.75)
    report.add("normal", "3d", 0.5, 0.5)
    table = report.format_table()
    assert "BEV@0.5" in table and "75.00" in table
    path = report.write_csv(tmp_path / "out" / "eval_report.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["category", "metric", "iou", "ap"]
    assert frame["ap"].tolist() == [0.75, 0.5]


def test_empty_report_table():
    assert EvalReport().format_table() == "(no results)"


def brute_force_ap(dets, gts, threshold, num_points=40):
    """Exhaustive IoU matrix per scene, then precision counted explicitly at every prefix"""
    ranked = sorted(dets, key=lambda d: -d[1].confidence)
    taken = set()
    flags = []
    for scene, det in ranked:
        ious = [(rotated_iou_bev(det.box, gt), j) for j, gt in enumerate(gts[scene]) if (scene, j) not in taken]
        iou, j = max(ious, default=(-1.0, -1))
        hit = iou >= threshold
        if hit:
            taken.add((scene, j))
        flags.append(hit)
    num_gts = sum(len(v) for v in gts.values())
    points = []
    for k in range(1, len(flags) + 1):
        hits = sum(flags[:k])
        points.append((hits / num_gts, hits / k))
    levels = [i / num_points for i in range(1, num_points + 1)]
    return sum(max([p for r, p in points if r >= level - 1e-12], default=0.0) for level in levels) / num_points


@pytest.mark.parametrize("seed", range(8))
def test_average_precision_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    gts, dets = {}, []
    for scene in range(3):
        slots = rng.permutation(6)[:rng.integers(1, 4)]
        boxes = [Box3D(8.0 * s, 0.0, -0.4, 2.0, 4.2, 1.8, rng.uniform(-0.3, 0.3)) for s in slots]
        gts[scene] = boxes
        for box in boxes:
            if rng.random() < 0.8:
                jitter = rng.normal(scale=0.4, size=2)
                dets.append((scene, Detection(Box3D(box.x + jitter[0], box.y + jitter[1], box.z, box.w, box.l,
                                                    box.h, box.theta), 0.0)))
        for _ in range(rng.integers(0, 3)):
            dets.append((scene, Detection(Box3D(rng.uniform(0, 48), rng.uniform(-6, 6), -0.4, 2.0, 4.2, 1.8), 0.0)))
    confidences = rng.permutation(len(dets)) / len(dets) + 0.01
    dets = [(scene, Detection(det.box, float(c))) for (scene, det), c in zip(dets, confidences)]
    for threshold in (0.3, 0.5, 0.7):
        assert average_precision(dets, gts, rotated_iou_bev, threshold) == pytest.approx(
            brute_force_ap(dets, gts, threshold), abs=1e-12)
