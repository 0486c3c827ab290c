"""
Oriented boxes and rotated IoU by convex polygon clipping.

Box3D follows (x, y, z, w, l, h, theta): centre, width across the heading, length along
the heading, height, and yaw about +z. BEV polygons are counter-clockwise.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

COLLINEAR_TOL = 1e-9


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float = 0.0

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box3D":
        return cls(*(float(v) for v in values[:7]))

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.theta])

    @property
    def bev_area(self) -> float:
        return self.w * self.l

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h

    @property
    def z_bounds(self):
        return self.z - 0.5 * self.h, self.z + 0.5 * self.h

    @property
    def bev_radius(self) -> float:
        return 0.5 * math.hypot(self.w, self.l)

    def corners_bev(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        hl, hw = 0.5 * self.l, 0.5 * self.w
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        # rotate then translate; order stays counter-clockwise
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Intersect ``subject`` with the convex CCW polygon ``clipper`` one half-plane at a time"""
    output: List[np.ndarray] = list(subject)
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inputs, output = output, []
        prev = inputs[-1]
        prev_side = side(prev)
        for cur in inputs:
            cur_side = side(cur)
            if cur_side >= -COLLINEAR_TOL:
                if prev_side < -COLLINEAR_TOL:
                    output.append(_intersect(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= -COLLINEAR_TOL:
                output.append(_intersect(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return np.array(output) if output else np.zeros((0, 2))


def _intersect(p: np.ndarray, q: np.ndarray, sp: float, sq: float) -> np.ndarray:
    t = sp / (sp - sq)
    return p + t * (q - p)


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    if math.hypot(a.x - b.x, a.y - b.y) > a.bev_radius + b.bev_radius:
        return 0.0
    return max(0.0, polygon_area(clip_polygon(a.corners_bev(), b.corners_bev())))


def _degenerate(box: Box3D) -> bool:
    return box.w <= 0.0 or box.l <= 0.0


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    if _degenerate(a) or _degenerate(b):
        return 0.0
    inter = bev_intersection_area(a, b)
    union = a.bev_area + b.bev_area - inter
    return inter / union if union > 0.0 else 0.0


def rotated_iou_3d(a: Box3D, b: Box3D) -> float:
    if _degenerate(a) or _degenerate(b) or a.h <= 0.0 or b.h <= 0.0:
        return 0.0
    a_lo, a_hi = a.z_bounds
    b_lo, b_hi = b.z_bounds
    overlap = min(a_hi, b_hi) - max(a_lo, b_lo)
    if overlap <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * overlap
    union = a.volume + b.volume - inter
    return inter / union if union > 0.0 else 0.0


def wrap_angle(theta: float) -> float:
    """Map to (-pi, pi]"""
    wrapped = math.atan2(math.sin(theta), math.cos(theta))
    return math.pi if wrapped == -math.pi else wrapped
