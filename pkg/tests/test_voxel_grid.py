import itertools

import numpy as np
import pytest

from modules.autodiff import Tensor
from modules.voxel_grid import (
    DESK_ROI,
    EmptyKeySetError,
    KernelSizeError,
    RoiSpec,
    SparseVoxelTensor,
    build_rulebook,
    coordinate_keys,
    empty_sparse,
    knn_count,
    knn_voxels,
    sparse_conv3d,
    voxelize,
    z_collapse_to_bev,
)


def random_sparse(rng, grid=(6, 5, 4), count=20, channels=3) -> SparseVoxelTensor:
    cells = np.array(list(itertools.product(*[range(n) for n in grid])))
    chosen = cells[rng.choice(len(cells), size=count, replace=False)]
    chosen = chosen[np.argsort(coordinate_keys(chosen, grid))]
    return SparseVoxelTensor(chosen, Tensor(rng.normal(size=(count, channels))), grid)


def dense_submanifold(inp: SparseVoxelTensor, w: np.ndarray) -> np.ndarray:
    k = w.shape[0]
    pad = k // 2
    dense = inp.dense()
    out = np.zeros((inp.num_voxels, w.shape[4]))
    for row, c in enumerate(inp.coords):
        for t in itertools.product(range(k), repeat=3):
            n = c + np.array(t) - pad
            if np.all(n >= 0) and np.all(n < inp.grid_shape):
                out[row] += dense[tuple(n)] @ w[t]
    return out


def test_voxelize_means_and_half_open_cells():
    roi = RoiSpec((0.0, 0.8), (0.0, 0.8), (0.0, 0.8), 0.4)
    points = np.array([
        [0.1, 0.1, 0.1, 1.0],
        [0.3, 0.1, 0.1, 3.0],
        [0.4, 0.0, 0.0, 5.0],   # lower face belongs to the next cell
        [0.8, 0.0, 0.0, 9.0],   # upper ROI face is outside
    ])
    vox = voxelize(points, roi)
    assert vox.coords.tolist() == [[0, 0, 0], [1, 0, 0]]
    np.testing.assert_allclose(vox.feats.data[0], [0.2, 0.1, 0.1, 2.0])
    np.testing.assert_allclose(vox.feats.data[1], [0.4, 0.0, 0.0, 5.0])


def test_voxelize_is_permutation_invariant(rng):
    points = np.column_stack([rng.uniform(0, 19.2, 500), rng.uniform(-6.4, 6.4, 500),
                              rng.uniform(-2, 6, 500), rng.random(500)])
    a = voxelize(points, DESK_ROI)
    b = voxelize(points[rng.permutation(500)], DESK_ROI)
    assert np.array_equal(a.coords, b.coords)
    assert np.array_equal(a.feats.data, b.feats.data)


def test_voxelize_empty():
    vox = voxelize(np.zeros((0, 4)), DESK_ROI)
    assert vox.num_voxels == 0 and vox.channels == 4


def test_roi_rejects_indivisible_range():
    with pytest.raises(ValueError):
        RoiSpec((0.0, 1.0), (0.0, 0.8), (0.0, 0.8), 0.3)


def test_desk_grid_shape():
    assert DESK_ROI.grid_shape == (48, 32, 20)
    assert DESK_ROI.bev_shape == (32, 48)


def test_lookup_marks_missing_and_outside(rng):
    inp = random_sparse(rng)
    probe = np.vstack([inp.coords[:3], [[-1, 0, 0], [99, 0, 0]]])
    idx = inp.lookup(probe)
    assert idx[:3].tolist() == [0, 1, 2]
    assert idx[3:].tolist() == [-1, -1]


@pytest.mark.parametrize("seed", range(5))
def test_submanifold_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    inp = random_sparse(rng)
    w = rng.normal(size=(3, 3, 3, 3, 2))
    out = sparse_conv3d(inp, Tensor(w))
    assert np.array_equal(out.coords, inp.coords)
    np.testing.assert_allclose(out.feats.data, dense_submanifold(inp, w), atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_strided_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    inp = random_sparse(rng, grid=(7, 6, 5), count=25)
    w = rng.normal(size=(3, 3, 3, 3, 2))
    out = sparse_conv3d(inp, Tensor(w), mode="strided", stride=2)
    assert out.grid_shape == (4, 3, 3) and out.stride == 2

    dense = inp.dense()
    expected = {}
    for o in itertools.product(*[range(n) for n in out.grid_shape]):
        acc, hit = np.zeros(2), False
        for t in itertools.product(range(3), repeat=3):
            i = 2 * np.array(o) + np.array(t) - 1
            if np.all(i >= 0) and np.all(i < inp.grid_shape) and inp.lookup(i)[0] >= 0:
                acc += dense[tuple(i)] @ w[t]
                hit = True
        if hit:
            expected[o] = acc
    assert [tuple(c) for c in out.coords] == sorted(expected, key=lambda c: coordinate_keys(np.array(c), out.grid_shape)[0])
    for row, c in enumerate(out.coords):
        np.testing.assert_allclose(out.feats.data[row], expected[tuple(c)], atol=1e-9)


def test_even_kernel_rejected(rng):
    inp = random_sparse(rng)
    with pytest.raises(KernelSizeError):
        build_rulebook(inp, kernel_size=2)
    with pytest.raises(KernelSizeError):
        sparse_conv3d(inp, Tensor(np.zeros((2, 2, 2, 3, 3))))


def test_sparse_conv_gradient(rng):
    """Tape gradients of the rulebook conv match central differences"""
    from modules import autodiff as ad
    inp = random_sparse(rng, count=10, channels=2)
    w = rng.normal(size=(3, 3, 3, 2, 2))
    weights = Tensor(w.copy(), requires_grad=True)
    feats = Tensor(inp.feats.data.copy(), requires_grad=True)
    probe = rng.normal(size=(10, 2))
    out = sparse_conv3d(inp.with_feats(feats), weights)
    ad.backward(ad.reduce_sum(ad.mul(out.feats, probe)))

    def value(wv):
        return float((sparse_conv3d(inp, Tensor(wv)).feats.data * probe).sum())

    for idx in [(1, 1, 1, 0, 0), (0, 1, 2, 1, 1), (2, 2, 2, 0, 1)]:
        plus, minus = w.copy(), w.copy()
        plus[idx] += 1e-5
        minus[idx] -= 1e-5
        assert weights.grad[idx] == pytest.approx((value(plus) - value(minus)) / 2e-5, rel=1e-5, abs=1e-8)
    assert feats.grad.shape == (10, 2)


def test_z_collapse_matches_dense_oracle(rng):
    inp = random_sparse(rng, grid=(3, 2, 2), count=6, channels=2)
    wc = rng.normal(size=(2, 2, 3))
    wu = rng.normal(size=(3, 2, 2, 2))
    out = z_collapse_to_bev(inp, Tensor(wc), Tensor(wu), (3, 5)).data
    assert out.shape == (2, 3, 5)

    collapsed = np.zeros((2, 3, 3))
    for c, f in zip(inp.coords, inp.feats.data):
        collapsed[c[1], c[0]] += f @ wc[c[2]]
    collapsed = np.maximum(collapsed, 0)
    full = np.zeros((2, 4, 6))
    for iy, ix in itertools.product(range(2), range(3)):
        full[:, 2 * iy:2 * iy + 2, 2 * ix:2 * ix + 2] = np.einsum("b,bcij->cij", collapsed[iy, ix], wu)
    np.testing.assert_allclose(out, full[:, :3, :5], atol=1e-12)


def test_z_collapse_empty_is_zero_map():
    out = z_collapse_to_bev(empty_sparse(2, (3, 2, 2)), Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 4, 2, 2))), (4, 6))
    assert out.shape == (4, 4, 6) and not out.data.any()


def test_knn_count_schedule():
    assert [knn_count(l) for l in (1, 2, 3)] == [64, 32, 16]


def test_knn_matches_exhaustive_scan(rng):
    keys = random_sparse(rng, grid=(8, 8, 4), count=30).coords
    queries = rng.integers(0, 8, size=(12, 3))
    idx = knn_voxels(queries, keys, 5, chunk=4)
    for q, row in zip(queries, idx):
        ranked = sorted(range(len(keys)), key=lambda j: (int(((keys[j] - q) ** 2).sum()), tuple(keys[j])))
        assert row.tolist() == ranked[:5]


def test_knn_caps_at_key_count_and_rejects_empty(rng):
    keys = np.array([[0, 0, 0], [1, 1, 1]])
    assert knn_voxels(np.array([[0, 0, 1]]), keys, 64).shape == (1, 2)
    with pytest.raises(EmptyKeySetError):
        knn_voxels(np.array([[0, 0, 0]]), np.zeros((0, 3)), 4)
