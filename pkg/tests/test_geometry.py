import math

import numpy as np
import pytest
from shapely.geometry import Polygon

from modules.geometry import Box3D, clip_polygon, polygon_area, rotated_iou_3d, rotated_iou_bev, wrap_angle


def test_shifted_squares_iou():
    a = Box3D(0.0, 0.0, 0.0, 2.0, 2.0, 1.0)
    b = Box3D(1.0, 0.0, 0.0, 2.0, 2.0, 1.0)
    assert rotated_iou_bev(a, b) == pytest.approx(1 / 3, abs=1e-12)


def test_identical_boxes_iou_one():
    a = Box3D(3.0, -1.0, 0.5, 1.8, 4.3, 1.5, 0.7)
    assert rotated_iou_bev(a, a) == pytest.approx(1.0, abs=1e-12)
    assert rotated_iou_3d(a, a) == pytest.approx(1.0, abs=1e-12)


def test_quarter_turn_of_square_is_same_footprint():
    a = Box3D(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0)
    b = Box3D(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, math.pi / 2)
    assert rotated_iou_bev(a, b) == pytest.approx(1.0, abs=1e-12)


def test_3d_iou_with_half_height_overlap():
    a = Box3D(0.0, 0.0, 0.0, 2.0, 4.0, 2.0)
    b = Box3D(0.0, 0.0, 1.0, 2.0, 4.0, 2.0)
    assert rotated_iou_3d(a, b) == pytest.approx(1 / 3, abs=1e-12)


def test_disjoint_and_degenerate_boxes():
    a = Box3D(0.0, 0.0, 0.0, 2.0, 4.0, 2.0)
    assert rotated_iou_bev(a, Box3D(50.0, 0.0, 0.0, 2.0, 4.0, 2.0)) == 0.0
    assert rotated_iou_bev(a, Box3D(0.0, 0.0, 0.0, 0.0, 4.0, 2.0)) == 0.0
    assert rotated_iou_3d(a, Box3D(0.0, 0.0, 5.0, 2.0, 4.0, 2.0)) == 0.0


def test_corners_are_counter_clockwise():
    box = Box3D(1.0, 2.0, 0.0, 1.5, 3.0, 1.0, 1.1)
    assert polygon_area(box.corners_bev()) == pytest.approx(4.5, abs=1e-12)


def test_clip_of_disjoint_polygons_is_empty():
    a = Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 1.0).corners_bev()
    b = Box3D(5.0, 0.0, 0.0, 1.0, 1.0, 1.0).corners_bev()
    assert len(clip_polygon(a, b)) == 0


@pytest.mark.parametrize("seed", range(10))
def test_rotated_iou_agrees_with_shapely(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        a = Box3D(*rng.uniform(-1, 1, 2), 0.0, *rng.uniform(0.5, 3.0, 2), 1.0, rng.uniform(-math.pi, math.pi))
        b = Box3D(*rng.uniform(-1, 1, 2), 0.0, *rng.uniform(0.5, 3.0, 2), 1.0, rng.uniform(-math.pi, math.pi))
        pa, pb = Polygon(a.corners_bev()), Polygon(b.corners_bev())
        inter = pa.intersection(pb).area
        expected = inter / (pa.area + pb.area - inter)
        assert rotated_iou_bev(a, b) == pytest.approx(expected, abs=1e-9)
        assert rotated_iou_bev(a, b) == pytest.approx(rotated_iou_bev(b, a), abs=1e-9)


@pytest.mark.parametrize("theta,expected", [
    (0.0, 0.0),
    (-math.pi, math.pi),
    (3 * math.pi, math.pi),
    (math.pi / 2 + 2 * math.pi, math.pi / 2),
])
def test_wrap_angle(theta, expected):
    assert wrap_angle(theta) == pytest.approx(expected, abs=1e-12)


def random_box(rng):
    return Box3D(*rng.uniform(-1, 1, 3), *rng.uniform(0.5, 3.0, 3), rng.uniform(-math.pi, math.pi))


def inside(box, points):
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = points[:, 0] - box.x, points[:, 1] - box.y
    along, across = dx * c + dy * s, -dx * s + dy * c
    return (np.abs(along) <= 0.5 * box.l) & (np.abs(across) <= 0.5 * box.w)


def rigid_transform(box, angle, shift):
    c, s = math.cos(angle), math.sin(angle)
    x = c * box.x - s * box.y + shift[0]
    y = s * box.x + c * box.y + shift[1]
    return Box3D(x, y, box.z + shift[2], box.w, box.l, box.h, box.theta + angle)


@pytest.mark.parametrize("seed", range(5))
def test_iou_is_symmetric(seed):
    rng = np.random.default_rng(100 + seed)
    for _ in range(20):
        a, b = random_box(rng), random_box(rng)
        assert rotated_iou_bev(a, b) == pytest.approx(rotated_iou_bev(b, a), abs=1e-12)
        assert rotated_iou_3d(a, b) == pytest.approx(rotated_iou_3d(b, a), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_iou_is_invariant_under_shared_rigid_transform(seed):
    rng = np.random.default_rng(200 + seed)
    for _ in range(20):
        a, b = random_box(rng), random_box(rng)
        angle, shift = rng.uniform(-math.pi, math.pi), rng.uniform(-30, 30, 3)
        ta, tb = rigid_transform(a, angle, shift), rigid_transform(b, angle, shift)
        assert rotated_iou_bev(ta, tb) == pytest.approx(rotated_iou_bev(a, b), abs=1e-9)
        assert rotated_iou_3d(ta, tb) == pytest.approx(rotated_iou_3d(a, b), abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_bev_iou_matches_monte_carlo_estimate(seed):
    rng = np.random.default_rng(300 + seed)
    a = Box3D(0.0, 0.0, 0.0, 2.0, 4.0, 1.0, rng.uniform(-math.pi, math.pi))
    b = Box3D(*rng.uniform(-1, 1, 2), 0.0, 1.8, 3.5, 1.0, rng.uniform(-math.pi, math.pi))
    points = rng.uniform(-4.0, 4.0, size=(200_000, 2))
    in_a, in_b = inside(a, points), inside(b, points)
    estimate = (in_a & in_b).sum() / (in_a | in_b).sum()
    assert rotated_iou_bev(a, b) == pytest.approx(estimate, abs=0.01)
