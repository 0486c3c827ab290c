"""
Run Logger Module - Track per-step losses and routing weights of a training/eval run
Writes: loss log, per-epoch routing summary, routing report (all CSV)
"""
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from modules.config import WEATHER_CATEGORIES

LOSS_COLUMNS = ["step", "L_det", "L_aux", "L_intra", "L_inter", "L_ent", "total", "H_bar"]
ROUTING_COLUMNS = ["sample_id", "weather", "w_L", "w_R", "w_F", "entropy"]
EPOCH_ROUTING_COLUMNS = ["epoch", "weather", "w_L", "w_R", "w_F", "H_bar"]


class RunLogger:
    """Collects loss and routing rows for one run and writes them as CSV"""

    LOSS_LOG = "loss_log.csv"
    EPOCH_ROUTING = "routing_epochs.csv"

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.loss_rows: List[Dict[str, Any]] = []
        self.routing_rows: List[Dict[str, Any]] = []

    def log_step(self, step: int, parts: Dict[str, float]) -> None:
        """Record one optimisation step; ``parts`` carries every loss column but ``step``"""
        row = {"step": step}
        row.update({col: float(parts[col]) for col in LOSS_COLUMNS[1:]})
        self.loss_rows.append(row)

    def log_routing(self, epoch: int, weather: int, weights: Sequence[float], entropy: float) -> None:
        self.routing_rows.append({
            "epoch": epoch,
            "weather": WEATHER_CATEGORIES[weather],
            "w_L": float(weights[0]),
            "w_R": float(weights[1]),
            "w_F": float(weights[2]),
            "H_bar": float(entropy),
        })

    def epoch_routing(self) -> pd.DataFrame:
        """Mean routing weights and entropy per (epoch, weather) in category order"""
        if not self.routing_rows:
            return pd.DataFrame(columns=EPOCH_ROUTING_COLUMNS)
        df = pd.DataFrame(self.routing_rows)
        df["order"] = df["weather"].map(WEATHER_CATEGORIES.index)
        grouped = df.groupby(["epoch", "order", "weather"], sort=True)[["w_L", "w_R", "w_F", "H_bar"]].mean()
        return grouped.reset_index().drop(columns="order")[EPOCH_ROUTING_COLUMNS]

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.loss_rows, columns=LOSS_COLUMNS)

    def flush(self) -> Dict[str, Path]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"loss_log": self.out_dir / self.LOSS_LOG, "routing_epochs": self.out_dir / self.EPOCH_ROUTING}
        self.loss_frame().to_csv(paths["loss_log"], index=False)
        self.epoch_routing().to_csv(paths["routing_epochs"], index=False)
        return paths


def routing_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=ROUTING_COLUMNS)


def write_routing_report(rows: List[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """CSV with header sample_id,weather,w_L,w_R,w_F,entropy"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    routing_frame(rows).to_csv(path, index=False)
    return path


def category_means(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    """Mean routing weights per weather category of a routing report"""
    df = routing_frame(rows)
    if df.empty:
        return df
    means = df.groupby("weather")[["w_L", "w_R", "w_F", "entropy"]].mean()
    order = [c for c in WEATHER_CATEGORIES if c in means.index]
    return means.loc[order]


# Helper class for timing training steps
class StepTimer:
    """Context manager for timing a training step"""
    def __init__(self):
        self.start_time: Optional[float] = None
        self.latency_ms = 0

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.latency_ms = int((time.perf_counter() - self.start_time) * 1000)
        return False
