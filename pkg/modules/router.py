"""
Branch router: token -> softmax weights over (LiDAR, radar, fusion) with a floor, and the
soft aggregation of the three branch BEV maps.
"""

from dataclasses import dataclass

import numpy as np

from modules import autodiff as ad
from modules.autodiff import ShapeError, Tensor
from modules.nn import Linear, Module

BRANCHES = ("L", "R", "F")


@dataclass
class RoutingWeights:
    """(w_L, w_R, w_F) as a differentiable tensor of shape (3,) or (B, 3)"""
    vector: Tensor

    @property
    def w_L(self) -> float:
        return float(self.vector.data[..., 0])

    @property
    def w_R(self) -> float:
        return float(self.vector.data[..., 1])

    @property
    def w_F(self) -> float:
        return float(self.vector.data[..., 2])

    def as_array(self) -> np.ndarray:
        return self.vector.data.copy()

    @classmethod
    def fixed(cls, branch: str) -> "RoutingWeights":
        """Constant one-hot weights pinning a single branch"""
        w = np.zeros(3)
        w[BRANCHES.index(branch)] = 1.0
        return cls(Tensor(w))


class BranchRouter(Module):
    """Two-layer MLP token -> 3 logits; the output layer starts at zero"""

    def __init__(self, token_dim: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.hidden = Linear(token_dim, max(1, token_dim // 2), rng, std=std)
        self.out = Linear(max(1, token_dim // 2), 3, rng, zero_init=True)

    def forward(self, token) -> Tensor:
        return self.out(ad.relu(self.hidden(token)))


def apply_weight_floor(weights, epsilon: float):
    """w <- (1 - 3 eps) w + eps; works on arrays and tensors"""
    if isinstance(weights, Tensor):
        return ad.add(ad.mul(weights, 1.0 - 3.0 * epsilon), epsilon)
    return (1.0 - 3.0 * epsilon) * np.asarray(weights, dtype=np.float64) + epsilon


def route(token: Tensor, router: BranchRouter, epsilon: float = 0.1, floor_disabled: bool = False) -> RoutingWeights:
    weights = ad.softmax(router(token), axis=-1)
    if not floor_disabled:
        weights = apply_weight_floor(weights, epsilon)
    return RoutingWeights(weights)


def aggregate(weights: RoutingWeights, bev_lidar: Tensor, bev_radar: Tensor, bev_fusion: Tensor) -> Tensor:
    """[(w_R + w_F) F_R | w_L F_L + w_F F_F] along channels"""
    if not (bev_lidar.shape == bev_radar.shape == bev_fusion.shape):
        raise ShapeError(f"aggregate: branch maps differ in shape "
                         f"(L {bev_lidar.shape}, R {bev_radar.shape}, F {bev_fusion.shape})")
    w = weights.vector
    w_l, w_r, w_f = w[0], w[1], w[2]
    radar_side = ad.mul(ad.add(w_r, w_f), bev_radar)
    lidar_side = ad.add(ad.mul(w_l, bev_lidar), ad.mul(w_f, bev_fusion))
    return ad.concat([radar_side, lidar_side], axis=0)


def routing_entropy(weights: np.ndarray) -> np.ndarray:
    """Entropy normalised by log 3, per row"""
    w = np.clip(np.asarray(weights, dtype=np.float64), 1e-12, 1.0)
    return -(w * np.log(w)).sum(axis=-1) / np.log(3.0)
