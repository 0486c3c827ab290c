"""
Condition token: visual token from the pseudo-image, semantic token from the prompt's soft
alignment to the weather vocabulary, and sensor-aware refinement from pooled voxel features.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from modules import autodiff as ad
from modules.autodiff import Tensor
from modules.nn import Conv2dLayer, LayerNorm, Linear, Mlp, Module, ModuleList
from modules.voxel_grid import SparseVoxelTensor


@dataclass
class ConditionOutput:
    token: Tensor
    alpha: Tensor
    visual: Tensor
    semantic: Tensor


class VisualBackbone(Module):
    """Three strided conv stages, global average pool, linear projection"""

    def __init__(self, channels: Sequence[int], token_dim: int, stride: int, rng: np.random.Generator):
        super().__init__()
        widths = [3] + list(channels)
        self.stages = ModuleList([Conv2dLayer(widths[i], widths[i + 1], rng, stride=stride) for i in range(3)])
        self.proj = Linear(widths[-1], token_dim, rng)

    def forward(self, image) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(image)
        for stage in self.stages:
            x = ad.relu(stage(x))
        return self.proj(ad.global_average_pool(x))


class SemanticProjection(Module):
    def __init__(self, token_dim: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Linear(token_dim, token_dim, rng)
        self.norm = LayerNorm(token_dim)


class SensorMixer(Module):
    """Shared context projection plus the mixing MLP over [c | t_R | t_L]"""

    def __init__(self, feat_dim: int, token_dim: int, rng: np.random.Generator):
        super().__init__()
        self.context = Linear(feat_dim, token_dim, rng)
        self.mlp = Mlp(3 * token_dim, 2 * token_dim, token_dim, rng)
        self.norm = LayerNorm(token_dim)


def visual_token(image, backbone: VisualBackbone) -> Tensor:
    return backbone(image)


def semantic_token(prompt, vocab_matrix: Tensor, params: SemanticProjection):
    """Returns (c_p, alpha) with alpha = softmax(p W^T) and c_p = relu(LN(linear(alpha W)))"""
    p = np.asarray(prompt.data if isinstance(prompt, Tensor) else prompt, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("semantic_token: prompt embedding has non-finite entries")
    if p.shape != (vocab_matrix.shape[1],):
        raise ad.ShapeError(f"semantic_token: prompt shape {p.shape} does not match vocabulary width {vocab_matrix.shape[1]}")
    prompt_t = prompt if isinstance(prompt, Tensor) else Tensor(p)
    alpha = ad.softmax(ad.matmul(vocab_matrix, prompt_t.reshape(-1, 1)).reshape(-1), axis=-1)
    mixed = ad.matmul(alpha.reshape(1, -1), vocab_matrix).reshape(-1)
    c_p = ad.relu(params.norm(params.proj(mixed)))
    return c_p, alpha


def pooled_context(feats: SparseVoxelTensor, mixer: SensorMixer) -> Tensor:
    """Shared projection of the feature GAP; the zero vector for an empty modality"""
    if feats.num_voxels == 0:
        return Tensor(np.zeros(mixer.context.out_features))
    return mixer.context(ad.reduce_mean(feats.feats, axis=0))


def refine_token(c_v: Tensor, c_p: Tensor, radar_feats: SparseVoxelTensor, lidar_feats: SparseVoxelTensor,
                 mixer: SensorMixer, use_sensor_refine: bool = True) -> Tensor:
    c = ad.mul(ad.add(c_v, c_p), 0.5)
    if not use_sensor_refine:
        return mixer.norm(c)
    t_r = pooled_context(radar_feats, mixer)
    t_l = pooled_context(lidar_feats, mixer)
    delta = mixer.mlp(ad.concat([c, t_r, t_l], axis=0))
    return mixer.norm(ad.add(c, delta))


class ConditionEncoder(Module):
    def __init__(self, token_dim: int, visual_channels: Sequence[int], visual_stride: int, feat_dim: int,
                 rng: np.random.Generator, use_sensor_refine: bool = True):
        super().__init__()
        self.use_sensor_refine = use_sensor_refine
        self.visual = VisualBackbone(visual_channels, token_dim, visual_stride, rng)
        self.semantic = SemanticProjection(token_dim, rng)
        self.mixer = SensorMixer(feat_dim, token_dim, rng)

    def forward(self, image, prompt, vocab_matrix: Tensor, lidar0: SparseVoxelTensor,
                radar0: SparseVoxelTensor) -> ConditionOutput:
        c_v = visual_token(image, self.visual)
        c_p, alpha = semantic_token(prompt, vocab_matrix, self.semantic)
        token = refine_token(c_v, c_p, radar0, lidar0, self.mixer, self.use_sensor_refine)
        return ConditionOutput(token=token, alpha=alpha, visual=c_v, semantic=c_p)
