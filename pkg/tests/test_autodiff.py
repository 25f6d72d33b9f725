import numpy as np
import pytest

from hrgr.autodiff import (ChainShapeError, DiffOp, GradCheckError, Step, backprop_chain,
                           grad_check, reports_to_json, reports_to_text, run_chain)
from hrgr.checks import GRADCHECK_CASES, gradcheck_case, run_gradchecks
from hrgr.reasoning import HrgrConfig, HrgrParams, block_steps, hrgr_block, hrgr_block_vjp


def _unary(name, f, df):
    return DiffOp(name, lambda x: ((f(x),), x), lambda x, g: (g * df(x),), 1)


def _linear(m, name):
    return DiffOp(name, lambda x: ((m @ x,), None), lambda _, g: (m.T @ g,), 1)


square = _unary("square", lambda x: x * x, lambda x: 2 * x)


def test_square_gradient_and_check():
    x = np.array([1.0, 2.0, 3.0])
    (out,), cache = square.forward(x)
    v = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(square.vjp(cache, v)[0], np.array([2.0, 4.0, 6.0]) * v)
    (rep,) = grad_check(square, [x], h=1e-5)
    assert rep.passed and rep.max_rel_err < 1e-8


def test_constant_map_has_zero_gradient():
    const = DiffOp("const", lambda x: ((np.full(3, 7.0),), None),
                   lambda _, g: (np.zeros(3),), 1)
    (rep,) = grad_check(const, [np.array([1.0, -2.0, 0.5])])
    assert rep.passed and rep.max_abs_err == 0.0


def test_wrong_vjp_fails_check():
    bad = _unary("bad", lambda x: x * x, lambda x: 3 * x)
    (rep,) = grad_check(bad, [np.array([1.0, 2.0])])
    assert not rep.passed


def test_non_finite_forward_raises():
    log = _unary("log", np.log, lambda x: 1 / x)
    with pytest.raises(GradCheckError), np.errstate(invalid="ignore"):
        grad_check(log, [np.array([-1.0, 2.0])])


def test_chain_of_two_linear_maps():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((2, 4))
    steps = [Step(_linear(a, "A"), ("x",), ("y",)), Step(_linear(b, "B"), ("y",), ("z",))]
    v = rng.standard_normal(2)
    grads = backprop_chain(steps, {"x": rng.standard_normal(3)}, {"z": v})
    np.testing.assert_allclose(grads["x"], a.T @ b.T @ v, rtol=0, atol=1e-14)


def test_fan_out_sums_branches():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    add = DiffOp("add", lambda p, q: ((p + q,), None), lambda _, g: (g, g), 2)
    steps = [Step(_linear(a, "A"), ("x",), ("p",)), Step(_linear(b, "B"), ("x",), ("q",)),
             Step(add, ("p", "q"), ("s",))]
    v = rng.standard_normal(3)
    grads = backprop_chain(steps, {"x": rng.standard_normal(3)}, {"s": v})
    np.testing.assert_allclose(grads["x"], a.T @ v + b.T @ v, rtol=0, atol=1e-14)


def test_cotangent_shape_mismatch():
    steps = [Step(square, ("x",), ("y",))]
    with pytest.raises(ChainShapeError):
        backprop_chain(steps, {"x": np.ones(3)}, {"y": np.ones(4)})


def test_chain_wiring_mismatch():
    with pytest.raises(ChainShapeError):
        run_chain([Step(square, ("x",), ("y", "z"))], {"x": np.ones(2)})


@pytest.mark.parametrize("name", sorted(GRADCHECK_CASES))
@pytest.mark.parametrize("seed", range(5))
def test_registered_gradchecks(name, seed):
    reports = run_gradchecks(name, [seed])
    assert reports and all(r.passed for r in reports), reports_to_text(reports)


@pytest.mark.parametrize("name", sorted(GRADCHECK_CASES))
def test_vjp_is_linear_in_cotangent(name):
    op, inputs, _ = gradcheck_case(name, seed=3)
    outs, cache = op.forward(*inputs)
    rng = np.random.default_rng(0)
    vs = [rng.standard_normal(np.shape(o)) if np.issubdtype(np.asarray(o).dtype, np.floating)
          else None for o in outs]
    g1 = op.vjp(cache, *vs)
    g2 = op.vjp(cache, *[None if v is None else 2 * v for v in vs])
    g0 = op.vjp(cache, *[None if v is None else np.zeros_like(v) for v in vs])
    for a, b, z in zip(g1, g2, g0):
        if a is None:
            assert b is None
            continue
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-12)
        assert np.all(z == 0)


def _block_case(seed):
    rng = np.random.default_rng(seed)
    cfg = HrgrConfig(n_regions=[4, 4], n_iter=2, rounds=2)
    feats = [rng.standard_normal((8, 8, 4)), rng.standard_normal((4, 4, 6))]
    params = HrgrParams.init([4, 6], graph_channels=8, rng=rng)
    params.mu = [np.array([0.6]), np.array([-1.1])]
    cots = [rng.standard_normal(f.shape) for f in feats]
    return cfg, feats, params, cots


@pytest.mark.parametrize("seed", range(3))
def test_chain_matches_monolithic_vjp(seed):
    cfg, feats, params, cots = _block_case(seed)
    _, _, (steps, env, saved) = hrgr_block(feats, params, cfg, return_env=True)
    grads = backprop_chain(steps, env, {f"out{i}": c for i, c in enumerate(cots)}, saved=saved)
    gf, gp = hrgr_block_vjp(feats, params, cfg, cots)
    for i in range(2):
        np.testing.assert_allclose(grads[f"f{i}"], gf[i], rtol=0, atol=1e-12)
    for name, g in gp.items():
        np.testing.assert_allclose(grads[name], g, rtol=0, atol=1e-12)


def test_block_gradient_reaches_every_parameter():
    cfg, feats, params, cots = _block_case(5)
    steps = block_steps(cfg, 2)
    values = {"f0": feats[0], "f1": feats[1], **params.to_dict()}
    grads = backprop_chain(steps, values, {"out0": cots[0], "out1": cots[1]})
    for name in params.names():
        assert name in grads and np.any(grads[name] != 0), name


def test_report_serialisation():
    reports = grad_check(square, [np.array([1.0, 2.0])], names=["x"])
    assert '"pass": true' in reports_to_json(reports)
    assert reports_to_text(reports).startswith("PASS  square")
