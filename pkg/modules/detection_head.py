"""
Anchor-based single-class detection head: anchors, box coding, target assignment, decode + NMS.

Anchor ``a`` of rotation ``r`` at BEV cell (iy, ix) has index ``(r * H + iy) * W + ix``,
matching the row-major flattening of the (rotations, H, W) classification map.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from modules import autodiff as ad
from modules.autodiff import Tensor
from modules.evaluation import Detection
from modules.geometry import Box3D, rotated_iou_bev
from modules.nn import Conv2dLayer, Module
from modules.voxel_grid import RoiSpec

CODE_SIZE = 8
POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class AnchorGrid:
    """(A, 7) anchor boxes over the BEV grid"""
    boxes: np.ndarray
    bev_shape: Tuple[int, int]
    num_rotations: int

    @property
    def count(self) -> int:
        return int(self.boxes.shape[0])

    def box(self, index: int) -> Box3D:
        return Box3D.from_array(self.boxes[index])

    @classmethod
    def build(cls, roi: RoiSpec, size: Sequence[float] = (2.1, 4.2, 2.0),
              rotations: Sequence[float] = (0.0, math.pi / 2)) -> "AnchorGrid":
        height, width = roi.bev_shape
        w, l, h = size
        xs = roi.x_range[0] + (np.arange(width) + 0.5) * roi.voxel_size
        ys = roi.y_range[0] + (np.arange(height) + 0.5) * roi.voxel_size
        z = 0.5 * (roi.z_range[0] + roi.z_range[1])
        grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
        blocks = []
        for theta in rotations:
            block = np.empty((height * width, 7))
            block[:, 0] = grid_x.reshape(-1)
            block[:, 1] = grid_y.reshape(-1)
            block[:, 2:] = (z, w, l, h, theta)
            blocks.append(block)
        return cls(np.concatenate(blocks), (height, width), len(rotations))


def encode_boxes(gts: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(x, y, z, w, l, h, theta) rows -> 8-d regression targets relative to anchors"""
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    return np.column_stack([
        (gts[:, 0] - anchors[:, 0]) / diag,
        (gts[:, 1] - anchors[:, 1]) / diag,
        (gts[:, 2] - anchors[:, 2]) / anchors[:, 5],
        np.log(gts[:, 3] / anchors[:, 3]),
        np.log(gts[:, 4] / anchors[:, 4]),
        np.log(gts[:, 5] / anchors[:, 5]),
        np.sin(gts[:, 6]),
        np.cos(gts[:, 6]),
    ])


def decode_boxes(codes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Heading is absolute: theta = atan2(sin, cos), independent of the anchor rotation"""
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    theta = np.arctan2(codes[:, 6], codes[:, 7])
    return np.column_stack([
        codes[:, 0] * diag + anchors[:, 0],
        codes[:, 1] * diag + anchors[:, 1],
        codes[:, 2] * anchors[:, 5] + anchors[:, 2],
        np.exp(codes[:, 3]) * anchors[:, 3],
        np.exp(codes[:, 4]) * anchors[:, 4],
        np.exp(codes[:, 5]) * anchors[:, 5],
        theta,
    ])


@dataclass(frozen=True)
class Targets:
    labels: np.ndarray
    reg: np.ndarray
    matched: np.ndarray

    @property
    def num_positive(self) -> int:
        return int((self.labels == POSITIVE).sum())


def assign_targets(anchors: AnchorGrid, gts: Sequence[Box3D], pos_iou: float = 0.5,
                   neg_iou: float = 0.2) -> Targets:
    """IoU >= pos_iou -> positive (best GT), <= neg_iou -> negative, otherwise ignored"""
    count = anchors.count
    labels = np.full(count, NEGATIVE, dtype=np.int64)
    reg = np.zeros((count, CODE_SIZE))
    matched = np.full(count, -1, dtype=np.int64)
    if not gts:
        return Targets(labels, reg, matched)

    boxes = anchors.boxes
    anchor_radius = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    best_iou = np.zeros(count)
    for g, gt in enumerate(gts):
        near = np.flatnonzero(np.hypot(boxes[:, 0] - gt.x, boxes[:, 1] - gt.y) < anchor_radius + gt.bev_radius)
        for a in near:
            iou = rotated_iou_bev(Box3D.from_array(boxes[a]), gt)
            if iou > best_iou[a]:
                best_iou[a] = iou
                matched[a] = g

    positive = best_iou >= pos_iou
    labels[(best_iou > neg_iou) & ~positive] = IGNORE
    labels[positive] = POSITIVE
    matched[~positive] = -1
    if positive.any():
        gt_array = np.array([gt.to_array() for gt in gts])
        reg[positive] = encode_boxes(gt_array[matched[positive]], boxes[positive])
    return Targets(labels, reg, matched)


class DetectionHead(Module):
    """3x3 classification and regression convolutions over the aggregated BEV map"""

    def __init__(self, in_channels: int, num_rotations: int, rng: np.random.Generator,
                 std: float = 0.01, prior: float = 0.01, zero_init: bool = False):
        super().__init__()
        self.num_rotations = num_rotations
        self.cls = Conv2dLayer(in_channels, num_rotations, rng, std=std, zero_init=zero_init)
        self.reg = Conv2dLayer(in_channels, num_rotations * CODE_SIZE, rng, std=std, zero_init=zero_init)
        if not zero_init:
            self.cls.bias.data = np.full(num_rotations, -math.log((1.0 - prior) / prior))


def head_forward(bev: Tensor, head: DetectionHead) -> Tuple[Tensor, Tensor]:
    """Returns logits (A, 1) and regression codes (A, 8)"""
    _, height, width = bev.shape
    r = head.num_rotations
    logits = ad.reshape(head.cls(bev), (r * height * width, 1))
    reg = ad.reshape(head.reg(bev), (r, CODE_SIZE, height, width))
    reg = ad.reshape(ad.permute(reg, (0, 2, 3, 1)), (r * height * width, CODE_SIZE))
    return logits, reg


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def nms(boxes: Sequence[Box3D], scores: np.ndarray, iou_thresh: float) -> List[int]:
    """Greedy BEV NMS; returns kept indices in descending score order"""
    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    keep: List[int] = []
    for i in order:
        if all(rotated_iou_bev(boxes[i], boxes[j]) <= iou_thresh for j in keep):
            keep.append(i)
    return keep


def decode_and_nms(logits: np.ndarray, reg: np.ndarray, anchors: AnchorGrid, conf_thresh: float = 0.3,
                   iou_thresh: float = 0.1) -> List[Detection]:
    """Every anchor at or above conf_thresh enters greedy NMS"""
    scores = sigmoid(np.asarray(logits, dtype=np.float64).reshape(-1))
    candidates = np.flatnonzero(scores >= conf_thresh)
    if candidates.size == 0:
        return []
    candidates = candidates[np.argsort(-scores[candidates], kind="stable")]
    decoded = decode_boxes(np.asarray(reg)[candidates], anchors.boxes[candidates])
    boxes = [Box3D.from_array(row) for row in decoded]
    keep = nms(boxes, scores[candidates], iou_thresh)
    return [Detection(boxes[i], float(scores[candidates][i])) for i in keep]
