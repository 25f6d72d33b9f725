import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrgr.autodiff import grad_check
from hrgr.loss import FocalConfig, focal_loss, focal_loss_op, focal_loss_vjp
from hrgr.tensor import ShapeError

EPS = 1e-7


def scalar_focal(y, t, alpha=0.5, gamma=2.0):
    y = min(max(y, EPS), 1 - EPS)
    if t == 1:
        return -alpha * (1 - y) ** gamma * math.log(y)
    return -(1 - alpha) * y ** gamma * math.log(1 - y)


def test_reference_value():
    expected = 0.5 * 0.25 * -math.log(0.5)
    assert abs(expected - 0.08664) < 1e-4
    assert focal_loss(np.array([0.5]), np.array([1])) == pytest.approx(expected, abs=1e-15)
    assert abs(focal_loss(np.array([0.5]), np.array([1])) - 0.08664) < 1e-4


def test_symmetric_at_half_alpha():
    assert focal_loss(np.array([0.5]), np.array([0])) == focal_loss(np.array([0.5]), np.array([1]))


def test_perfect_prediction_is_near_zero():
    assert focal_loss(np.array([1.0, 0.0]), np.array([1, 0])) < 1e-5


def test_gamma_zero_is_half_bce():
    rng = np.random.default_rng(0)
    y = rng.uniform(0.01, 0.99, 50)
    t = (rng.random(50) < 0.4).astype(int)
    bce = sum(-(ti * math.log(yi) + (1 - ti) * math.log(1 - yi)) for yi, ti in zip(y, t))
    got = focal_loss(y, t, FocalConfig(alpha=0.5, gamma=0.0))
    assert abs(got - 0.5 * bce) < 1e-10


def test_matches_scalar_evaluation():
    rng = np.random.default_rng(1)
    y = rng.uniform(0, 1, 40)
    t = (rng.random(40) < 0.5).astype(int)
    cfg = FocalConfig(alpha=0.3, gamma=1.5)
    expected = sum(scalar_focal(a, b, 0.3, 1.5) for a, b in zip(y, t))
    assert focal_loss(y, t, cfg) == pytest.approx(expected, rel=1e-12)
    assert focal_loss(y, t, cfg, "mean") == pytest.approx(expected / 40, rel=1e-12)


def test_reference_derivative():
    g = focal_loss_vjp(np.array([0.5]), np.array([1]))
    expected = -0.5 * (1 * math.log(2) + 0.5)
    assert abs(expected - -0.5966) < 1e-4
    np.testing.assert_allclose(g, [expected], rtol=1e-14)


def test_zero_upstream_gives_zero_gradient():
    rng = np.random.default_rng(2)
    g = focal_loss_vjp(rng.uniform(0.1, 0.9, 5), np.array([1, 0, 1, 0, 1]), upstream=0.0)
    assert np.all(g == 0)


def test_gradient_zero_where_clamped():
    g = focal_loss_vjp(np.array([0.0, 1.0, 0.5]), np.array([1, 0, 1]))
    assert g[0] == 0 and g[1] == 0 and g[2] != 0


@pytest.mark.parametrize("gamma", [0.0, 1.0, 2.0, 3.5])
@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_gradcheck(gamma, reduction):
    rng = np.random.default_rng(3)
    t = (rng.random(30) < 0.3).astype(float)
    op = focal_loss_op(t, FocalConfig(gamma=gamma), reduction)
    (rep,) = grad_check(op, [rng.uniform(0.05, 0.95, 30)])
    assert rep.passed, rep.line()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.data())
def test_non_negative(ys, data):
    t = data.draw(st.lists(st.sampled_from([0, 1]), min_size=len(ys), max_size=len(ys)))
    assert focal_loss(np.array(ys), np.array(t)) >= 0


def test_monotone_for_positive_pixels_on_grid():
    y = np.linspace(1e-3, 1 - 1e-3, 999)
    losses = [focal_loss(np.array([v]), np.array([1])) for v in y]
    assert np.all(np.diff(losses) < 0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-4, 1 - 1e-4), st.floats(1e-4, 1 - 1e-4))
def test_monotone_for_positive_pixels(a, b):
    if abs(a - b) < 1e-6:
        return
    lo, hi = min(a, b), max(a, b)
    assert focal_loss(np.array([lo]), np.array([1])) > focal_loss(np.array([hi]), np.array([1]))


def test_input_validation():
    with pytest.raises(ValueError):
        focal_loss(np.array([0.5]), np.array([2]))
    with pytest.raises(ShapeError):
        focal_loss(np.array([0.5, 0.5]), np.array([1]))
    with pytest.raises(ValueError):
        focal_loss(np.array([0.5]), np.array([1]), reduction="max")
    with pytest.raises(ValueError):
        FocalConfig(alpha=1.5)
    with pytest.raises(ValueError):
        FocalConfig(gamma=-1)
