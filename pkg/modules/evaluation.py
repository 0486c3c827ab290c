"""
Average precision over rotated-box IoU and the per-weather evaluation report
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from modules.geometry import Box3D, rotated_iou_3d, rotated_iou_bev

logger = logging.getLogger(__name__)

IouFn = Callable[[Box3D, Box3D], float]

METRICS: Dict[str, IouFn] = {
    "bev": rotated_iou_bev,
    "3d": rotated_iou_3d,
}


@dataclass(frozen=True)
class Detection:
    box: Box3D
    confidence: float


def match_detections(dets: Sequence[Tuple[Hashable, Detection]], gts: Mapping[Hashable, Sequence[Box3D]],
                     iou_fn: IouFn, threshold: float) -> np.ndarray:
    """
    Confidence-descending greedy matching; returns a TP flag per detection in sorted order.

    Each detection takes the unmatched GT of its scene with the highest IoU, if that IoU
    reaches the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1].confidence)
    matched = {scene: np.zeros(len(boxes), dtype=bool) for scene, boxes in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        scene, det = dets[i]
        boxes = gts.get(scene, ())
        best, best_iou = -1, -1.0
        for j, gt in enumerate(boxes):
            if matched[scene][j]:
                continue
            iou = iou_fn(det.box, gt)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= threshold:
            matched[scene][best] = True
            tp[rank] = True
    return tp


def interpolated_ap(tp: np.ndarray, num_gts: int, num_points: int = 40) -> float:
    """Mean interpolated precision at recall levels 1/n, 2/n, ..., 1"""
    if num_gts == 0 or tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / num_gts
    precision = cum_tp / np.arange(1, tp.size + 1)
    total = 0.0
    for r in np.arange(1, num_points + 1) / num_points:
        reached = precision[recall >= r - 1e-12]
        total += float(reached.max()) if reached.size else 0.0
    return total / num_points


def average_precision(dets: Sequence[Tuple[Hashable, Detection]], gts: Mapping[Hashable, Sequence[Box3D]],
                      iou_fn: IouFn, threshold: float, num_points: int = 40) -> float:
    num_gts = sum(len(v) for v in gts.values())
    if num_gts == 0:
        logger.warning("average_precision: no ground-truth boxes; AP defined as 0")
        return 0.0
    tp = match_detections(dets, gts, iou_fn, threshold)
    return interpolated_ap(tp, num_gts, num_points)


@dataclass
class EvalReport:
    """AP per (category, metric, iou threshold); values in [0, 1]"""
    rows: List[Dict[str, Union[str, float]]] = field(default_factory=list)

    def add(self, category: str, metric: str, iou: float, ap: float) -> None:
        self.rows.append({"category": category, "metric": metric, "iou": float(iou), "ap": float(ap)})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["category", "metric", "iou", "ap"])

    def get(self, category: str, metric: str, iou: float) -> float:
        for row in self.rows:
            if row["category"] == category and row["metric"] == metric and abs(row["iou"] - iou) < 1e-12:
                return float(row["ap"])
        raise KeyError(f"No AP for {category}/{metric}@{iou}")

    def format_table(self) -> str:
        """Categories as rows, metric@iou as columns, values x100"""
        df = self.to_frame()
        if df.empty:
            return "(no results)"
        df["column"] = df["metric"].str.upper() + "@" + df["iou"].map(lambda v: f"{v:.1f}")
        table = df.pivot(index="category", columns="column", values="ap") * 100.0
        categories = list(dict.fromkeys(df["category"]))
        columns = sorted(table.columns, key=lambda c: (float(c.split("@")[1]), c.split("@")[0] != "BEV"))
        return table.loc[categories, columns].to_string(float_format=lambda v: f"{v:6.2f}")

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


def evaluate_detections(predictions: Mapping[Hashable, Sequence[Detection]],
                        ground_truth: Mapping[Hashable, Sequence[Box3D]],
                        categories: Mapping[Hashable, str],
                        iou_thresholds: Sequence[float] = (0.3, 0.5),
                        num_points: int = 40,
                        category_order: Sequence[str] = ()) -> EvalReport:
    """Per-category and total AP_BEV / AP_3D over scenes keyed by scene id"""
    present = list(dict.fromkeys(categories[s] for s in ground_truth))
    ordered = [c for c in category_order if c in present] + [c for c in present if c not in category_order]
    report = EvalReport()
    for category in ordered + ["total"]:
        scenes = [s for s in ground_truth if category == "total" or categories[s] == category]
        gts = {s: list(ground_truth[s]) for s in scenes}
        dets = [(s, d) for s in scenes for d in predictions.get(s, ())]
        for iou in iou_thresholds:
            for metric, fn in METRICS.items():
                report.add(category, metric, iou, average_precision(dets, gts, fn, iou, num_points))
    return report
