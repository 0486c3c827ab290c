import numpy as np
import pytest

from modules.autodiff import ShapeError, Tensor
from modules.router import (
    BranchRouter,
    RoutingWeights,
    aggregate,
    apply_weight_floor,
    route,
    routing_entropy,
)


@pytest.fixture
def maps(rng):
    return tuple(Tensor(rng.normal(size=(2, 3, 4))) for _ in range(3))


def test_fresh_router_is_uniform(rng):
    router = BranchRouter(8, rng)
    weights = route(Tensor(rng.normal(size=8)), router)
    np.testing.assert_allclose(weights.as_array(), [1 / 3] * 3, atol=1e-15)
    unfloored = route(Tensor(rng.normal(size=8)), router, floor_disabled=True)
    np.testing.assert_allclose(unfloored.as_array(), [1 / 3] * 3, atol=1e-15)


def test_weight_floor_affine_map():
    np.testing.assert_allclose(apply_weight_floor([1.0, 0.0, 0.0], 0.1), [0.8, 0.1, 0.1], atol=1e-15)


def test_floored_weights_stay_in_range(rng):
    router = BranchRouter(8, rng)
    router.out.weight.data[:] = rng.normal(size=router.out.weight.shape) * 50
    for _ in range(10):
        w = route(Tensor(rng.normal(size=8)), router, epsilon=0.1).as_array()
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        assert (w >= 0.1 - 1e-12).all() and (w <= 0.8 + 1e-12).all()


def test_fixed_weights_select_one_branch():
    w = RoutingWeights.fixed("R")
    assert (w.w_L, w.w_R, w.w_F) == (0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        RoutingWeights.fixed("X")


def test_aggregate_lidar_only(maps):
    f_l, f_r, f_f = maps
    out = aggregate(RoutingWeights.fixed("L"), f_l, f_r, f_f).data
    assert out.shape == (4, 3, 4)
    np.testing.assert_array_equal(out[:2], 0.0)
    np.testing.assert_array_equal(out[2:], f_l.data)


def test_aggregate_radar_only(maps):
    f_l, f_r, f_f = maps
    out = aggregate(RoutingWeights.fixed("R"), f_l, f_r, f_f).data
    np.testing.assert_array_equal(out[:2], f_r.data)
    np.testing.assert_array_equal(out[2:], 0.0)


def test_aggregate_fusion_keeps_radar_side(maps):
    f_l, f_r, f_f = maps
    out = aggregate(RoutingWeights.fixed("F"), f_l, f_r, f_f).data
    np.testing.assert_array_equal(out[:2], f_r.data)
    np.testing.assert_array_equal(out[2:], f_f.data)


def test_aggregate_mixed_weights(maps):
    f_l, f_r, f_f = maps
    out = aggregate(RoutingWeights(Tensor([0.5, 0.3, 0.2])), f_l, f_r, f_f).data
    np.testing.assert_allclose(out[:2], 0.5 * f_r.data, atol=1e-15)
    np.testing.assert_allclose(out[2:], 0.5 * f_l.data + 0.2 * f_f.data, atol=1e-15)


def test_aggregate_shape_mismatch(maps, rng):
    f_l, f_r, _ = maps
    with pytest.raises(ShapeError):
        aggregate(RoutingWeights.fixed("L"), f_l, f_r, Tensor(rng.normal(size=(2, 3, 5))))


def test_routing_entropy_bounds():
    assert routing_entropy(np.full(3, 1 / 3)) == pytest.approx(1.0, abs=1e-12)
    assert routing_entropy(np.array([1.0, 0.0, 0.0])) == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(routing_entropy(np.array([[0.8, 0.1, 0.1]] * 2)), 0.581672, atol=1e-6)


def test_floor_preserves_argmax_over_simplex_grid():
    steps = 40
    for i in range(steps + 1):
        for j in range(steps + 1 - i):
            w = np.array([i, j, steps - i - j]) / steps
            floored = apply_weight_floor(w, 0.1)
            assert np.argmax(floored) == np.argmax(w)
            assert (floored >= 0.1 - 1e-12).all() and (floored <= 0.8 + 1e-12).all()


def test_floor_preserves_argmax_of_routed_tokens(rng):
    router = BranchRouter(8, rng)
    router.out.weight.data[:] = rng.normal(size=router.out.weight.shape) * 5
    for token in rng.normal(size=(500, 8)):
        raw = route(Tensor(token), router, floor_disabled=True).as_array()
        floored = route(Tensor(token), router, epsilon=0.1).as_array()
        assert np.argmax(floored) == np.argmax(raw)
        np.testing.assert_allclose(floored, 0.7 * raw + 0.1, atol=1e-15)
