import numpy as np
import pytest

from modules.autodiff import GradientError, Tensor
from modules.nn import Parameter
from modules.optim import AdamState, AdamW, cosine_lr, optimizer_step


def test_first_step_matches_hand_evaluation():
    """p=1, g=1, lr=0.1: bias-corrected moments are both 1, so p -> 1 - 0.1/(1 + eps)"""
    p = Parameter(np.array(1.0))
    p.grad = np.array(1.0)
    optimizer_step([("p", p)], AdamState(), lr=0.1, weight_decay=0.0)
    assert p.data == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)


def test_decoupled_weight_decay():
    """Decay shrinks the weight directly, independent of the gradient"""
    p = Parameter(np.array(1.0))
    p.grad = np.array(1.0)
    optimizer_step([("p", p)], AdamState(), lr=0.1, weight_decay=0.01)
    assert p.data == pytest.approx(1.0 * (1 - 0.1 * 0.01) - 0.1 / (1.0 + 1e-8), abs=1e-15)


def test_zero_gradient_without_decay_is_identity(rng):
    data = rng.normal(size=(3, 2))
    p = Parameter(data.copy())
    p.grad = np.zeros((3, 2))
    optimizer_step([("p", p)], AdamState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, data)


def test_missing_gradient_rejected():
    p = Parameter(np.ones(2))
    with pytest.raises(GradientError, match="'p'"):
        optimizer_step([("p", p)], AdamState(), lr=0.1)


def test_adamw_prefix_filter_updates_only_matching():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    opt = AdamW([("encoder.visual.w", a), ("head.w", b)], lr=0.1, weight_decay=0.0)
    opt.zero_grad()
    a.grad, b.grad = np.ones(2), np.ones(2)
    opt.step(prefixes=("encoder.visual",))
    assert (a.data < 1).all()
    np.testing.assert_array_equal(b.data, np.ones(2))
    assert opt.state.step == 1


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 20, 5e-4, 1e-4) == pytest.approx(5e-4)
    assert cosine_lr(19, 20, 5e-4, 1e-4) == pytest.approx(1e-4)
    lrs = [cosine_lr(e, 20, 5e-4, 1e-4) for e in range(20)]
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))
