"""
Training objectives: focal + smooth-L1 detection loss, class-weighted auxiliary weather
loss, routing diversity and routing entropy, and their weighted total.
"""

import itertools
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules import autodiff as ad
from modules.autodiff import Tensor
from modules.detection_head import IGNORE, POSITIVE, Targets
from modules.nn import Mlp
from modules.router import RoutingWeights

NUM_WEATHER = 7
LOG_FLOOR = 1e-12

Scalar = Union[Tensor, float]


class WeatherLabelError(ValueError):
    """Raised when a weather label lies outside 0..6"""


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term evaluates to NaN or inf"""

    def __init__(self, term: str, value: float, step: Optional[int] = None):
        self.term = term
        self.value = value
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"loss term '{term}' is non-finite ({value}){where}")


def _value(x: Scalar) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


# ----------------------------------------------------------------------
# Detection
# ----------------------------------------------------------------------

def focal_loss(logits: Tensor, labels: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed sigmoid focal loss over anchors labelled 0/1; logits shape (n, 1)"""
    labels = np.asarray(labels).reshape(-1, 1)
    sign = np.where(labels == POSITIVE, 1.0, -1.0)
    alpha_t = np.where(labels == POSITIVE, alpha, 1.0 - alpha)
    p_t = ad.sigmoid(ad.mul(logits, sign))
    log_p = ad.log(ad.clamp(p_t, lo=LOG_FLOOR))
    modulator = ad.power(ad.sub(1.0, p_t), gamma)
    return ad.reduce_sum(ad.mul(ad.mul(modulator, log_p), -alpha_t))


def detection_loss(logits: Tensor, reg: Tensor, targets: Targets, alpha: float = 0.25, gamma: float = 2.0,
                   beta: float = 1.0) -> Tuple[Tensor, Dict[str, float]]:
    """
    L_det = focal over non-ignored anchors + smooth-L1 over positive anchors, both divided
    by max(1, #positives). Returns the loss and its two parts as floats.
    """
    normaliser = float(max(1, targets.num_positive))
    active = np.flatnonzero(targets.labels != IGNORE)
    cls = ad.mul(focal_loss(ad.gather_rows(logits, active), targets.labels[active], alpha, gamma),
                 1.0 / normaliser)

    positive = np.flatnonzero(targets.labels == POSITIVE)
    if positive.size:
        diff = ad.sub(ad.gather_rows(reg, positive), targets.reg[positive])
        box = ad.mul(ad.reduce_sum(ad.smooth_l1(diff, beta)), 1.0 / normaliser)
    else:
        box = Tensor(0.0)
    return ad.add(cls, box), {"cls": cls.item(), "reg": box.item()}


# ----------------------------------------------------------------------
# Auxiliary weather supervision
# ----------------------------------------------------------------------

def check_weather_label(label: int) -> int:
    if isinstance(label, bool) or not isinstance(label, (int, np.integer)) or not 0 <= int(label) < NUM_WEATHER:
        raise WeatherLabelError(f"weather label must be an integer in 0..{NUM_WEATHER - 1}, got {label!r}")
    return int(label)


def weather_cross_entropy(logits: Tensor, label: int, rho: Sequence[float]) -> Tensor:
    """-rho_y * log softmax(z)_y using a max-shifted log-sum-exp"""
    y = check_weather_label(label)
    if logits.shape != (NUM_WEATHER,):
        raise ad.ShapeError(f"weather_cross_entropy: logits shape {logits.shape}, expected ({NUM_WEATHER},)")
    shift = float(logits.data.max())
    lse = ad.add(ad.log(ad.reduce_sum(ad.exp(ad.sub(logits, shift)))), shift)
    return ad.mul(ad.sub(lse, logits[y]), float(rho[y]))


def aux_weather_loss(token: Tensor, aux_head: Mlp, label: int, rho: Sequence[float]) -> Tensor:
    return weather_cross_entropy(aux_head(token), label, rho)


# ----------------------------------------------------------------------
# Routing regularisers
# ----------------------------------------------------------------------

def _weight_rows(batch_weights: Sequence[Union[RoutingWeights, Tensor]]) -> List[Tensor]:
    return [w.vector if isinstance(w, RoutingWeights) else ad.as_tensor(w) for w in batch_weights]


def diversity_loss(batch_weights: Sequence[Union[RoutingWeights, Tensor]], batch_labels: Sequence[int],
                   margin: float = 0.12) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (L_intra, L_inter, L_div)"""
    rows = _weight_rows(batch_weights)
    if not rows:
        raise ValueError("diversity_loss: empty batch")
    if len(rows) != len(batch_labels):
        raise ValueError(f"diversity_loss: {len(rows)} weight vectors but {len(batch_labels)} labels")

    groups: Dict[int, List[Tensor]] = {}
    for row, label in zip(rows, batch_labels):
        groups.setdefault(check_weather_label(label), []).append(ad.reshape(row, (1, 3)))

    centers, spreads = [], []
    for label in sorted(groups):
        members = ad.concat(groups[label], axis=0)
        center = ad.reduce_mean(members, axis=0, keepdims=True)
        spreads.append(ad.reduce_mean(ad.reduce_sum(ad.power(ad.sub(members, center), 2.0), axis=1)))
        centers.append(center)
    intra = ad.mul(ad.reduce_sum(ad.concat([ad.reshape(s, (1,)) for s in spreads], axis=0)), 1.0 / len(spreads))

    pairs = list(itertools.combinations(range(len(centers)), 2))
    if pairs:
        hinges = []
        for j, k in pairs:
            distance = ad.sqrt(ad.reduce_sum(ad.power(ad.sub(centers[j], centers[k]), 2.0)))
            hinges.append(ad.reshape(ad.relu(ad.sub(margin, distance)), (1,)))
        inter = ad.mul(ad.reduce_sum(ad.concat(hinges, axis=0)), 1.0 / len(pairs))
    else:
        inter = Tensor(0.0)
    return intra, inter, ad.add(intra, inter)


def entropy_loss(batch_weights: Sequence[Union[RoutingWeights, Tensor]], tau: float = 0.78) -> Tuple[Tensor, Tensor]:
    """Returns (H_bar, max(0, tau - H_bar)); entropy normalised by log 3"""
    rows = _weight_rows(batch_weights)
    if not rows:
        raise ValueError("entropy_loss: empty batch")
    w = ad.concat([ad.reshape(r, (1, 3)) for r in rows], axis=0)
    plogp = ad.mul(w, ad.log(ad.clamp(w, lo=LOG_FLOOR)))
    h_bar = ad.mul(ad.reduce_mean(ad.reduce_sum(plogp, axis=1)), -1.0 / math.log(3.0))
    return h_bar, ad.relu(ad.sub(tau, h_bar))


# ----------------------------------------------------------------------
# Total
# ----------------------------------------------------------------------

@dataclass
class LossBreakdown:
    L_det: Scalar
    L_aux: Scalar
    L_intra: Scalar
    L_inter: Scalar
    L_ent: Scalar
    H_bar: Scalar
    total: Scalar

    @property
    def L_div(self) -> float:
        return _value(self.L_intra) + _value(self.L_inter)

    def as_row(self) -> Dict[str, float]:
        """Values keyed by loss-log column"""
        return {key: _value(getattr(self, key))
                for key in ("L_det", "L_aux", "L_intra", "L_inter", "L_ent", "total", "H_bar")}

    def check_finite(self, step: Optional[int] = None) -> None:
        for key, value in self.as_row().items():
            if not math.isfinite(value):
                raise NonFiniteLossError(key, value, step)


def total_loss(l_det: Scalar, l_aux: Scalar, l_div: Scalar, l_ent: Scalar,
               lambdas: Tuple[float, float, float] = (0.1, 0.02, 0.01)) -> Scalar:
    """L = L_det + lambda_aux L_aux + lambda_div L_div + lambda_ent L_ent"""
    lambda_aux, lambda_div, lambda_ent = lambdas
    if not any(isinstance(x, Tensor) for x in (l_det, l_aux, l_div, l_ent)):
        return float(l_det) + lambda_aux * float(l_aux) + lambda_div * float(l_div) + lambda_ent * float(l_ent)
    total = ad.as_tensor(l_det)
    for weight, term in ((lambda_aux, l_aux), (lambda_div, l_div), (lambda_ent, l_ent)):
        if weight != 0.0:
            total = ad.add(total, ad.mul(term, weight))
    return total
