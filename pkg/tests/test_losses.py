import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from aneuseg.losses import (
    LossParams,
    WeightedDiceLoss,
    figure4_grid,
    soft_dice,
    wdl,
    wdl_gradient,
    weight_factor_G,
)


def central_difference(f, x, h=1e-4):
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (f(up) - f(down)) / (2 * h)
    return grad


def test_soft_dice_examples():
    ones = np.ones(10)
    assert soft_dice(ones, ones) == 1.0
    zeros = np.zeros(10)
    assert soft_dice(zeros, zeros) == 1.0
    # 2 (0.5 + 5e-5) / (1 + 0.5 + 1e-4) = 1.0001 / 1.5001
    assert soft_dice([1, 0], [0.5, 0.5], 1e-4) == pytest.approx(1.0001 / 1.5001, rel=1e-12)
    assert soft_dice([1, 0], [0.5, 0.5], 1e-4) == pytest.approx(0.66669, abs=1e-5)


def test_soft_dice_shape_mismatch():
    with pytest.raises(ValueError):
        soft_dice(np.zeros(3), np.zeros(4))


def test_wdl_examples():
    ones = np.ones((3, 3, 3))
    assert wdl(ones, ones, LossParams(beta=1.0)) == 0.0
    assert wdl(ones, ones, LossParams(beta=0.0)) == -1.0
    d = 1.0001 / 1.5001
    assert wdl([1, 0], [0.5, 0.5], LossParams(1.0, 1e-4)) == pytest.approx((1 - d) * -d, rel=1e-12)
    assert wdl([1, 0], [0.5, 0.5], LossParams(1.0, 1e-4)) == pytest.approx(-0.22222, abs=1e-5)


@pytest.mark.parametrize("beta", [-0.1, 1.5])
def test_beta_outside_unit_interval_rejected(beta):
    with pytest.raises(ValueError):
        LossParams(beta=beta)


def instance(seed, shape=(4, 4, 4)):
    rng = np.random.default_rng(seed)
    return (rng.random(shape) < 0.4).astype(np.float64), rng.random(shape)


@given(st.integers(0, 10**6), st.floats(0, 1))
def test_wdl_bounds_and_reduction(seed, beta):
    gt, pred = instance(seed)
    value = wdl(gt, pred, LossParams(beta))
    assert -1.0 <= value <= 0.0
    assert wdl(gt, pred, LossParams(0.0)) == -soft_dice(gt, pred)


@pytest.mark.parametrize("beta", [0.0, 0.1, 0.5, 0.9, 1.0])
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(beta, seed):
    gt, pred = instance(seed)
    p = LossParams(beta)
    analytic = wdl_gradient(gt, pred, p)
    numeric = central_difference(lambda x: wdl(gt, x, p), pred)
    scale = np.maximum(np.abs(numeric), np.abs(analytic).max() * 1e-3)
    assert np.max(np.abs(analytic - numeric) / scale) < 1e-4


def test_gradient_beta_zero_is_plain_dice_gradient():
    gt, pred = instance(7)
    plain = central_difference(lambda x: -soft_dice(gt, x), pred)
    np.testing.assert_allclose(wdl_gradient(gt, pred, LossParams(0.0)), plain, rtol=1e-5, atol=1e-9)


@pytest.mark.parametrize("beta", [0.0, 0.5, 1.0])
def test_gradient_finite_on_degenerate_inputs(beta):
    p = LossParams(beta)
    for gt, pred in [
        (np.zeros(8), np.zeros(8)),
        (np.ones(8), np.ones(8)),
        (np.zeros(8), np.full(8, 0.5)),
        (np.ones(8), np.zeros(8)),
    ]:
        assert np.all(np.isfinite(wdl_gradient(gt, pred, p)))


@pytest.mark.parametrize("beta", [0.0, 0.3, 1.0])
def test_torch_loss_matches_reference(beta):
    gt, pred = instance(3, (1, 4, 4, 4))
    probs = torch.tensor(np.stack([1 - pred, pred], axis=1), requires_grad=True)
    loss = WeightedDiceLoss(LossParams(beta))(probs, torch.tensor(gt))
    loss.backward()
    assert loss.item() == pytest.approx(wdl(gt, pred, LossParams(beta)), rel=1e-10)
    np.testing.assert_allclose(
        probs.grad[:, 1].numpy(), wdl_gradient(gt, pred, LossParams(beta)), rtol=1e-8, atol=1e-12
    )


@given(arrays(np.float64, 8, elements=st.floats(0, 1)), st.floats(0.05, 1))
def test_weight_factor_is_larger_for_worse_prediction(pred, beta):
    gt = np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=float)
    d1 = soft_dice(gt, pred)
    d2 = soft_dice(gt, gt)
    if d1 < d2:
        assert (1 - d1) ** beta > (1 - d2) ** beta


def test_G_endpoints():
    assert weight_factor_G(0, 1) == -1.0
    assert weight_factor_G(1, 1) == 0.0
    for x in np.linspace(0, 0.99, 12):
        assert weight_factor_G(x, 0) == -1.0
    with pytest.raises(ValueError):
        weight_factor_G(1.2, 1)


def test_G_nondecreasing_for_positive_exponents():
    xs = np.linspace(0, 1, 101)
    for y in np.arange(1, 11) / 10:
        assert np.all(np.diff(weight_factor_G(xs, y)) >= 0)


def test_figure4_grid_shape():
    grid = figure4_grid()
    assert grid.shape == (1010, 3)
    assert np.allclose(grid[:, 2], -(1 - grid[:, 0]) ** grid[:, 1])


@pytest.mark.parametrize("beta", [0.5, 1.0])
def test_wdl_as_function_of_dsc_is_not_monotone(beta):
    """(1 - d)^beta * (-d) bottoms out at d = 1 / (1 + beta), not at a perfect overlap."""
    d = np.linspace(0, 1, 100001)
    values = (1 - d) ** beta * -d
    assert d[np.argmin(values)] == pytest.approx(1 / (1 + beta), abs=1e-4)
    assert values[-1] == 0.0
