"""
Three parallel sparse encoders (LiDAR-only, radar-only, condition-gated fusion) and their
BEV projections.

The LiDAR-only and fusion branches run the same encoder parameters; the fusion branch
additionally absorbs gated KNN attention over radar voxels after every layer, so both
branches share coordinate sets at every layer. The radar branch has its own parameters.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules import autodiff as ad
from modules.autodiff import Tensor
from modules.nn import Linear, Module, ModuleList, Parameter, gaussian
from modules.voxel_grid import (
    Rulebook,
    SparseVoxelTensor,
    build_rulebook,
    knn_count,
    knn_voxels,
    sparse_conv3d,
    z_collapse_to_bev,
)

KERNEL = 3
LAYERS = 3


class GateRangeError(AssertionError):
    """Raised when a condition gate entry leaves the open interval (0, 1)"""


def _sparse_kernel(rng: np.random.Generator, c_in: int, c_out: int) -> Parameter:
    std = math.sqrt(1.0 / (KERNEL ** 3 * c_in))
    return Parameter(gaussian(rng, (KERNEL, KERNEL, KERNEL, c_in, c_out), std))


class ResidualBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = _sparse_kernel(rng, channels, channels)
        self.conv2 = _sparse_kernel(rng, channels, channels)


class EncoderLayer(Module):
    """Strided sparse conv followed by two submanifold residual blocks"""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.down = _sparse_kernel(rng, c_in, c_out)
        self.blocks = ModuleList([ResidualBlock(c_out, rng) for _ in range(2)])


@dataclass
class LayerRulebooks:
    down: Rulebook
    subm: Rulebook


class GatedFusion(Module):
    """Value projection, layer token projection and gate for one fusion layer"""

    def __init__(self, channels: int, token_dim: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.value = Linear(channels, channels, rng)
        self.token_proj = Linear(token_dim, channels, rng)
        # rows [0, C) act on pooled keys, rows [C, 2C) on the layer token
        self.gate = Linear(2 * channels, channels, rng)


class BevProjection(Module):
    """Full-height z collapse then a stride x stride transposed conv to the base BEV grid"""

    def __init__(self, z_levels: int, channels: int, bev_channels: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.collapse = Parameter(gaussian(rng, (z_levels, channels, bev_channels), math.sqrt(1.0 / channels)))
        self.upsample = Parameter(gaussian(rng, (bev_channels, bev_channels, stride, stride),
                                           math.sqrt(1.0 / bev_channels)))

    def forward(self, x: SparseVoxelTensor, bev_shape: Tuple[int, int]) -> Tensor:
        return z_collapse_to_bev(x, self.collapse, self.upsample, bev_shape)


def strided_grid(grid_shape: Sequence[int], layers: int = LAYERS) -> List[Tuple[int, int, int]]:
    """Grid extents after 1..layers stride-2 convolutions"""
    grids, grid = [], tuple(grid_shape)
    pad = KERNEL // 2
    for _ in range(layers):
        grid = tuple((n + 2 * pad - KERNEL) // 2 + 1 for n in grid)
        grids.append(grid)
    return grids


def input_layer(voxels: SparseVoxelTensor, params: Linear) -> SparseVoxelTensor:
    """Pointwise linear lift + relu of the raw voxel channels"""
    return voxels.with_feats(ad.relu(params(voxels.feats)))


def encode_layer(branch_in: SparseVoxelTensor, layer: EncoderLayer,
                 rulebooks: Optional[LayerRulebooks] = None) -> Tuple[SparseVoxelTensor, LayerRulebooks]:
    """Downsample by 2 then apply x + conv(relu(conv(x))) twice on the fixed coordinate set"""
    if rulebooks is None:
        down = build_rulebook(branch_in, KERNEL, "strided", 2)
        x = sparse_conv3d(branch_in, layer.down, rulebook=down)
        rulebooks = LayerRulebooks(down, build_rulebook(x, KERNEL, "submanifold"))
    else:
        x = sparse_conv3d(branch_in, layer.down, rulebook=rulebooks.down)
    x = x.with_feats(ad.relu(x.feats))
    for block in layer.blocks:
        h = sparse_conv3d(x, block.conv1, rulebook=rulebooks.subm)
        h = sparse_conv3d(h.with_feats(ad.relu(h.feats)), block.conv2, rulebook=rulebooks.subm)
        x = x.with_feats(ad.add(x.feats, h.feats))
    return x, rulebooks


def check_gate_range(gate: np.ndarray) -> None:
    if gate.size and not np.all((gate > 0.0) & (gate < 1.0)):
        raise GateRangeError(f"gate entries must lie strictly in (0, 1); range [{gate.min()}, {gate.max()}]")


def gated_knn_fuse(lidar_layer: SparseVoxelTensor, radar_layer: SparseVoxelTensor, token: Tensor,
                   fuse: GatedFusion, layer: int, knn_base: int = 64, scaled_attention: bool = True,
                   use_gate: bool = True, diagnostics: Optional[Dict[str, np.ndarray]] = None) -> SparseVoxelTensor:
    """
    F_i = softmax(q_i K_i^T) V_i * g_i + q_i over the K_l nearest radar voxels.

    Without radar voxels the LiDAR layer is returned unchanged.
    """
    if radar_layer.num_voxels == 0 or lidar_layer.num_voxels == 0:
        return lidar_layer
    n, c = lidar_layer.num_voxels, lidar_layer.channels
    idx = knn_voxels(lidar_layer.coords, radar_layer.coords, knn_count(layer, knn_base))
    kk = idx.shape[1]

    q = lidar_layer.feats
    keys = ad.gather_rows(radar_layer.feats, idx)
    values = fuse.value(keys)
    scores = ad.reduce_sum(ad.mul(ad.reshape(q, (n, 1, c)), keys), axis=-1)
    if scaled_attention:
        scores = ad.mul(scores, 1.0 / math.sqrt(c))
    attention = ad.softmax(scores, axis=-1)
    aggregated = ad.reduce_sum(ad.mul(ad.reshape(attention, (n, kk, 1)), values), axis=1)

    if use_gate:
        token_l = fuse.token_proj(token)
        # GAP over neighbours commutes with the linear map
        pooled = ad.reduce_mean(keys, axis=1)
        logits = ad.add(ad.matmul(pooled, fuse.gate.weight[:c]),
                        ad.add(ad.matmul(ad.reshape(token_l, (1, c)), fuse.gate.weight[c:]), fuse.gate.bias))
        gate = ad.sigmoid(logits)
        check_gate_range(gate.data)
        aggregated = ad.mul(aggregated, gate)
        if diagnostics is not None:
            diagnostics["gate"] = gate.data
    if diagnostics is not None:
        diagnostics["attention"] = attention.data
        diagnostics["neighbours"] = idx
    return lidar_layer.with_feats(ad.add(aggregated, q))


@dataclass
class BranchOutputs:
    bev_lidar: Tensor
    bev_radar: Tensor
    bev_fusion: Tensor
    lidar_layers: List[SparseVoxelTensor] = field(default_factory=list)
    radar_layers: List[SparseVoxelTensor] = field(default_factory=list)
    fusion_layers: List[SparseVoxelTensor] = field(default_factory=list)


class MultiBranchBackbone(Module):
    def __init__(self, channels: Sequence[int], bev_channels: int, token_dim: int,
                 grid_shape: Tuple[int, int, int], rng: np.random.Generator, knn_base: int = 64,
                 scaled_attention: bool = True, use_condition_gate: bool = True):
        super().__init__()
        self.knn_base = knn_base
        self.scaled_attention = scaled_attention
        self.use_condition_gate = use_condition_gate
        self.bev_shape = (grid_shape[1], grid_shape[0])
        widths = [channels[0]] + list(channels)
        grids = strided_grid(grid_shape)

        self.lidar_input = Linear(4, channels[0], rng)
        self.radar_input = Linear(4, channels[0], rng)
        self.shared_layers = ModuleList([EncoderLayer(widths[l], widths[l + 1], rng) for l in range(LAYERS)])
        self.radar_layers = ModuleList([EncoderLayer(widths[l], widths[l + 1], rng) for l in range(LAYERS)])
        self.fusions = ModuleList([GatedFusion(channels[l], token_dim, rng) for l in range(LAYERS)])
        self.shared_bev = ModuleList([BevProjection(grids[l][2], channels[l], bev_channels, 2 ** (l + 1), rng)
                                      for l in range(LAYERS)])
        self.radar_bev = ModuleList([BevProjection(grids[l][2], channels[l], bev_channels, 2 ** (l + 1), rng)
                                     for l in range(LAYERS)])

    @property
    def bev_width(self) -> int:
        """Channels of one branch BEV map (all layers concatenated)"""
        return LAYERS * self.shared_bev[0].upsample.shape[1]


def run_backbone(lidar0: SparseVoxelTensor, radar0: SparseVoxelTensor, token: Tensor,
                 backbone: MultiBranchBackbone) -> BranchOutputs:
    """Encode all three branches and project each to a layer-concatenated BEV map"""
    lidar, radar, fusion = lidar0, radar0, lidar0
    out = BranchOutputs(None, None, None)
    for l in range(LAYERS):
        lidar, rulebooks = encode_layer(lidar, backbone.shared_layers[l])
        fusion, _ = encode_layer(fusion, backbone.shared_layers[l], rulebooks)
        radar, _ = encode_layer(radar, backbone.radar_layers[l])
        fusion = gated_knn_fuse(fusion, radar, token, backbone.fusions[l], l + 1, backbone.knn_base,
                                backbone.scaled_attention, backbone.use_condition_gate)
        out.lidar_layers.append(lidar)
        out.radar_layers.append(radar)
        out.fusion_layers.append(fusion)

    shape = backbone.bev_shape
    out.bev_lidar = ad.concat([backbone.shared_bev[l](x, shape) for l, x in enumerate(out.lidar_layers)], axis=0)
    out.bev_fusion = ad.concat([backbone.shared_bev[l](x, shape) for l, x in enumerate(out.fusion_layers)], axis=0)
    out.bev_radar = ad.concat([backbone.radar_bev[l](x, shape) for l, x in enumerate(out.radar_layers)], axis=0)
    return out
