"""
Sparse voxel tensors and the operations over them.

Coordinates are integer (ix, iy, iz) triples kept unique and lexicographically sorted, so a
linear key ``(ix * ny + iy) * nz + iz`` is monotone in coordinate order and lookups are a
binary search over the keys. Sparse convolution runs over a rulebook: per kernel offset,
the pairs (input row, output row) that the offset connects.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from modules import autodiff as ad
from modules.autodiff import Function, ShapeError, Tensor

logger = logging.getLogger(__name__)


class KernelSizeError(ValueError):
    """Raised for even sparse kernel sizes (no centre site)"""


class EmptyKeySetError(LookupError):
    """Raised by knn_voxels when there are no keys to search"""


@dataclass(frozen=True)
class RoiSpec:
    x_range: Tuple[float, float] = (0.0, 72.0)
    y_range: Tuple[float, float] = (-6.4, 6.4)
    z_range: Tuple[float, float] = (-2.0, 6.0)
    voxel_size: float = 0.4

    def __post_init__(self):
        for axis, (lo, hi) in zip("xyz", (self.x_range, self.y_range, self.z_range)):
            if hi <= lo:
                raise ValueError(f"ROI {axis}-range {lo, hi} is empty")
            cells = (hi - lo) / self.voxel_size
            if abs(cells - round(cells)) > 1e-9:
                raise ValueError(f"ROI {axis}-range {lo, hi} is not divisible by voxel size {self.voxel_size}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def grid_shape(self) -> Tuple[int, int, int]:
        return tuple(int(round((hi - lo) / self.voxel_size))
                     for lo, hi in (self.x_range, self.y_range, self.z_range))

    @property
    def bev_shape(self) -> Tuple[int, int]:
        """(height, width) = (ny, nx)"""
        nx, ny, _ = self.grid_shape
        return ny, nx

    def contains_xy(self, x: float, y: float) -> bool:
        return self.x_range[0] <= x < self.x_range[1] and self.y_range[0] <= y < self.y_range[1]


PAPER_ROI = RoiSpec()
DESK_ROI = RoiSpec(x_range=(0.0, 19.2))


def coordinate_keys(coords: np.ndarray, grid_shape: Sequence[int]) -> np.ndarray:
    _, ny, nz = grid_shape
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return (coords[:, 0] * ny + coords[:, 1]) * nz + coords[:, 2]


def decode_keys(keys: np.ndarray, grid_shape: Sequence[int]) -> np.ndarray:
    _, ny, nz = grid_shape
    keys = np.asarray(keys, dtype=np.int64)
    iz = keys % nz
    iy = (keys // nz) % ny
    ix = keys // (nz * ny)
    return np.stack([ix, iy, iz], axis=1)


@dataclass(frozen=True, eq=False)
class SparseVoxelTensor:
    coords: np.ndarray
    feats: Tensor
    grid_shape: Tuple[int, int, int]
    stride: int = 1
    keys: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if coords.shape[0] != self.feats.shape[0]:
            raise ShapeError(f"SparseVoxelTensor: {coords.shape[0]} coords but {self.feats.shape[0]} feature rows")
        if coords.size and ((coords < 0).any() or (coords >= np.asarray(self.grid_shape)).any()):
            raise ValueError(f"SparseVoxelTensor: coordinates outside grid {self.grid_shape}")
        keys = coordinate_keys(coords, self.grid_shape)
        if keys.size > 1 and not np.all(np.diff(keys) > 0):
            raise ValueError("SparseVoxelTensor: coordinates must be unique and sorted")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "keys", keys)

    @property
    def num_voxels(self) -> int:
        return int(self.coords.shape[0])

    @property
    def channels(self) -> int:
        return int(self.feats.shape[1])

    def with_feats(self, feats: Tensor) -> "SparseVoxelTensor":
        return SparseVoxelTensor(self.coords, feats, self.grid_shape, self.stride)

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index of each coordinate, -1 where inactive or outside the grid"""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        inside = np.all((coords >= 0) & (coords < np.asarray(self.grid_shape)), axis=1)
        result = np.full(coords.shape[0], -1, dtype=np.int64)
        if not self.num_voxels or not inside.any():
            return result
        keys = coordinate_keys(coords[inside], self.grid_shape)
        pos = np.searchsorted(self.keys, keys)
        pos_clipped = np.minimum(pos, self.num_voxels - 1)
        hit = self.keys[pos_clipped] == keys
        result[np.flatnonzero(inside)[hit]] = pos_clipped[hit]
        return result

    def dense(self) -> np.ndarray:
        """(nx, ny, nz, C) dense array; zeros at inactive sites"""
        out = np.zeros(tuple(self.grid_shape) + (self.feats.shape[1],))
        if self.num_voxels:
            out[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = self.feats.data
        return out


def empty_sparse(channels: int, grid_shape: Tuple[int, int, int], stride: int = 1) -> SparseVoxelTensor:
    return SparseVoxelTensor(np.zeros((0, 3), dtype=np.int64), Tensor(np.zeros((0, channels))), grid_shape, stride)


def voxelize(points: np.ndarray, roi: RoiSpec) -> SparseVoxelTensor:
    """Mean-pool raw point channels per voxel over half-open ROI cells"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    grid = roi.grid_shape
    if points.shape[0] == 0:
        return empty_sparse(4, grid)

    idx = np.floor((points[:, :3] - roi.lower) / roi.voxel_size).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid)), axis=1)
    points, idx = points[inside], idx[inside]
    if points.shape[0] == 0:
        return empty_sparse(4, grid)

    keys = coordinate_keys(idx, grid)
    # fixed summation order regardless of input order
    order = np.lexsort((points[:, 3], points[:, 2], points[:, 1], points[:, 0], keys))
    keys, points = keys[order], points[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    counts = np.diff(np.r_[starts, keys.shape[0]])
    means = np.add.reduceat(points, starts, axis=0) / counts[:, None]
    return SparseVoxelTensor(decode_keys(keys[starts], grid), Tensor(means), grid)


# ----------------------------------------------------------------------
# Sparse convolution
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Rulebook:
    """Kernel-offset -> (input rows, output rows) pairs for one convolution"""
    out_coords: np.ndarray
    out_grid: Tuple[int, int, int]
    out_stride: int
    kernel_size: int
    pairs: List[Tuple[int, np.ndarray, np.ndarray]]

    @property
    def num_out(self) -> int:
        return int(self.out_coords.shape[0])


def _kernel_taps(kernel_size: int):
    return list(itertools.product(range(kernel_size), repeat=3))


def build_rulebook(inp: SparseVoxelTensor, kernel_size: int = 3, mode: str = "submanifold",
                   stride: int = 2) -> Rulebook:
    if kernel_size % 2 == 0:
        raise KernelSizeError(f"sparse kernel size {kernel_size} is even; no centre site")
    pad = kernel_size // 2
    taps = _kernel_taps(kernel_size)

    if mode == "submanifold":
        out = inp
        pairs = []
        for k, tap in enumerate(taps):
            neighbour = out.lookup(out.coords + (np.asarray(tap) - pad))
            valid = neighbour >= 0
            if valid.any():
                pairs.append((k, neighbour[valid], np.flatnonzero(valid)))
        return Rulebook(inp.coords, inp.grid_shape, inp.stride, kernel_size, pairs)

    if mode != "strided":
        raise ValueError(f"Unknown sparse conv mode '{mode}'")

    out_grid = tuple((n + 2 * pad - kernel_size) // stride + 1 for n in inp.grid_shape)
    if inp.num_voxels == 0:
        return Rulebook(np.zeros((0, 3), dtype=np.int64), out_grid, inp.stride * stride, kernel_size, [])

    # input i feeds output o through tap t when i = stride * o + t - pad
    candidates = []
    per_tap = []
    for tap in taps:
        shifted = inp.coords - np.asarray(tap) + pad
        valid = np.all((shifted % stride == 0), axis=1)
        o = shifted // stride
        valid &= np.all((o >= 0) & (o < np.asarray(out_grid)), axis=1)
        per_tap.append((np.flatnonzero(valid), o[valid]))
        candidates.append(o[valid])
    out_keys = np.unique(coordinate_keys(np.concatenate(candidates), out_grid))
    out_coords = decode_keys(out_keys, out_grid)

    pairs = []
    for k, (in_rows, o) in enumerate(per_tap):
        if in_rows.size:
            out_rows = np.searchsorted(out_keys, coordinate_keys(o, out_grid))
            pairs.append((k, in_rows, out_rows))
    return Rulebook(out_coords, out_grid, inp.stride * stride, kernel_size, pairs)


class RulebookConv(Function):
    """out[o] += x[i] @ W[k] for every rulebook pair (k, i, o)"""

    name = "sparse_conv3d"

    def forward(self, x, w, rulebook: Optional[Rulebook] = None):
        self.x, self.w, self.rulebook = x, w, rulebook
        out = np.zeros((rulebook.num_out, w.shape[2]))
        # within one offset every output row appears at most once
        for k, in_rows, out_rows in rulebook.pairs:
            out[out_rows] += x[in_rows] @ w[k]
        return out

    def backward(self, grad):
        gx = np.zeros_like(self.x)
        gw = np.zeros_like(self.w)
        for k, in_rows, out_rows in self.rulebook.pairs:
            g = grad[out_rows]
            gx[in_rows] += g @ self.w[k].T
            gw[k] = self.x[in_rows].T @ g
        return gx, gw


def sparse_conv3d(inp: SparseVoxelTensor, weights: Tensor, mode: str = "submanifold",
                  stride: int = 2, rulebook: Optional[Rulebook] = None) -> SparseVoxelTensor:
    """Sparse 3D convolution with weights shaped (k, k, k, C_in, C_out)"""
    if weights.ndim != 5:
        raise ShapeError(f"sparse_conv3d: weights must be (k, k, k, C_in, C_out), got {weights.shape}")
    k = weights.shape[0]
    if k % 2 == 0:
        raise KernelSizeError(f"sparse kernel size {k} is even; no centre site")
    if inp.channels != weights.shape[3]:
        raise ShapeError(f"sparse_conv3d: feature width {inp.channels} does not match C_in {weights.shape[3]}")
    if rulebook is None:
        rulebook = build_rulebook(inp, k, mode, stride)
    flat = ad.reshape(weights, (k ** 3, weights.shape[3], weights.shape[4]))
    feats = RulebookConv.apply(inp.feats, flat, rulebook=rulebook)
    return SparseVoxelTensor(rulebook.out_coords, feats, rulebook.out_grid, rulebook.out_stride)


# ----------------------------------------------------------------------
# BEV projection
# ----------------------------------------------------------------------

def z_collapse_to_bev(inp: SparseVoxelTensor, collapse_weights: Tensor, upsample_weights: Tensor,
                      bev_shape: Tuple[int, int]) -> Tensor:
    """
    Collapse z with a full-height kernel, then upsample to the stride-1 BEV grid.

    collapse_weights: (nz_s, C, Cb), one matrix per z level at this stride
    upsample_weights: (Cb, C_out, s, s), a transposed conv with kernel = stride = s
    Returns a (C_out, H, W) map, zero where no voxels project.
    """
    height, width = bev_shape
    nx_s, ny_s, nz_s = inp.grid_shape
    c_b = collapse_weights.shape[2]
    c_out, s = upsample_weights.shape[1], upsample_weights.shape[2]
    if collapse_weights.shape[0] != nz_s or collapse_weights.shape[1] != inp.channels:
        raise ShapeError(f"z_collapse_to_bev: collapse weights {collapse_weights.shape} "
                         f"do not fit {nz_s} z-levels x {inp.channels} channels")
    if inp.num_voxels == 0:
        return Tensor(np.zeros((c_out, height, width)))

    cells = inp.coords[:, 1] * nx_s + inp.coords[:, 0]
    collapsed = None
    for iz in np.unique(inp.coords[:, 2]):
        rows = np.flatnonzero(inp.coords[:, 2] == iz)
        part = ad.matmul(ad.gather_rows(inp.feats, rows), collapse_weights[int(iz)])
        part = ad.scatter_add(part, cells[rows], ny_s * nx_s)
        collapsed = part if collapsed is None else ad.add(collapsed, part)
    collapsed = ad.relu(collapsed)

    up = ad.matmul(collapsed, ad.reshape(upsample_weights, (c_b, c_out * s * s)))
    up = ad.reshape(up, (ny_s, nx_s, c_out, s, s))
    up = ad.permute(up, (2, 0, 3, 1, 4))
    up = ad.reshape(up, (c_out, ny_s * s, nx_s * s))
    if up.shape[1] < height or up.shape[2] < width:
        raise ShapeError(f"z_collapse_to_bev: upsampled map {up.shape} smaller than BEV {bev_shape}")
    if up.shape[1:] != (height, width):
        up = ad.slice_(up, (slice(None), slice(0, height), slice(0, width)))
    return up


# ----------------------------------------------------------------------
# Nearest neighbours
# ----------------------------------------------------------------------

def knn_count(layer: int, base: int = 64) -> int:
    """K_l = floor(base / 2^(l-1))"""
    return max(1, base // (2 ** (layer - 1)))


def knn_voxels(query_coords: np.ndarray, key_coords: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """
    Indices of the k nearest keys for every query by squared integer distance.

    Returns a (Q, min(k, M)) array. Ties resolve to the lexicographically smaller key.
    """
    key_coords = np.asarray(key_coords, dtype=np.int64).reshape(-1, 3)
    query_coords = np.asarray(query_coords, dtype=np.int64).reshape(-1, 3)
    if key_coords.shape[0] == 0:
        raise EmptyKeySetError("knn_voxels: key set is empty")
    if k <= 0:
        raise ValueError(f"knn_voxels: k must be positive, got {k}")

    lex = np.lexsort((key_coords[:, 2], key_coords[:, 1], key_coords[:, 0]))
    keys = key_coords[lex]
    kk = min(k, keys.shape[0])
    result = np.empty((query_coords.shape[0], kk), dtype=np.int64)
    for start in range(0, query_coords.shape[0], chunk):
        q = query_coords[start:start + chunk]
        diff = q[:, None, :] - keys[None, :, :]
        dist = np.einsum("qkd,qkd->qk", diff, diff)
        order = np.argsort(dist, axis=1, kind="stable")[:, :kk]
        result[start:start + chunk] = lex[order]
    return result
