import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgmnet import autodiff as ad
from dgmnet import gradcheck, losses
from dgmnet.errors import NumericError
from dgmnet.gmamba import ScanParams, selective_scan_1d


def grad_of(fn, *values):
    tape = ad.Tape()
    xs = [tape.var(v) for v in values]
    g = ad.backward(tape, fn(*xs))
    return [g[x] for x in xs]


def test_square_and_logistic():
    assert grad_of(lambda x: x * x, 3.0)[0] == 6.0
    assert grad_of(ad.sigmoid, 0.0)[0] == 0.25


def test_non_scalar_output_rejected():
    tape = ad.Tape()
    x = tape.var(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(tape, x * 2.0)


def test_tape_topological_order():
    tape = ad.Tape()
    x = tape.var(2.0)
    y = ad.exp(x) * x + ad.log(x)
    for node_id, node in enumerate(tape.nodes):
        assert all(pid < node_id for _, pid in node.parents)
    assert y.id == len(tape) - 1


def test_mixed_tapes_rejected():
    a, b = ad.Tape().var(1.0), ad.Tape().var(2.0)
    with pytest.raises(ValueError):
        a + b


def test_unreached_input_gets_zero():
    tape = ad.Tape()
    x, y = tape.var(np.ones(2)), tape.var(np.ones(3))
    g = ad.backward(tape, ad.sum_(x))
    assert np.all(g[y] == 0.0)


@pytest.mark.parametrize("fn, point, expected", [
    (ad.relu, 0.0, 0.0),
    (ad.relu, 1.5, 1.0),
    (ad.abs_, 0.0, 0.0),
    (lambda x: ad.clip(x, -1.0, 1.0), 1.0, 0.0),
    (lambda x: ad.clip(x, -1.0, 1.0), 0.3, 1.0),
    (lambda x: ad.clip(x, -1.0, 1.0), -2.0, 0.0),
])
def test_kink_conventions(fn, point, expected):
    assert grad_of(fn, point)[0] == expected


def test_finite_difference_examples():
    assert abs(ad.finite_difference(lambda x: float(x.sum()), np.array([0.7]))[0] - 1.0) < 1e-9
    g = ad.finite_difference(lambda x: float(np.exp(x).sum()), np.array([0.0]))[0]
    assert abs(g - 1.0) < 1e-9
    with pytest.raises(NumericError), np.errstate(invalid="ignore", divide="ignore"):
        ad.finite_difference(lambda x: float(np.log(x).sum()), np.array([0.0]))


def test_d_loss_gradient_at_half():
    g = grad_of(lambda p: losses.d_loss(ad.reshape(p, (1, 1)), np.ones((1, 1))), 0.5)[0]
    assert abs(g - (-40.0)) < 1e-6


def test_scan_gradient_matches_finite_differences():
    rng = np.random.default_rng(2024)
    p = ScanParams.init(1, 3, rng)
    x = rng.uniform(-1, 1, size=5)
    g = grad_of(lambda v: ad.sum_(selective_scan_1d(v, p, 0)), x)[0]
    fd = ad.finite_difference(lambda v: selective_scan_1d(v, p, 0).sum(), x)
    assert ad.relative_error(g, fd).max() < 1e-6


@settings(max_examples=25)
@given(st.integers(0, 2 ** 32 - 1))
def test_backward_is_linear(seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.1, 2, size=4)

    def f(x):
        return ad.sum_(ad.mul(ad.exp(x), ad.sigmoid(x)))

    def g(x):
        return ad.sum_(ad.div(ad.softplus(x), x))

    both = grad_of(lambda x: ad.add(f(x), g(x)), v)[0]
    np.testing.assert_allclose(both, grad_of(f, v)[0] + grad_of(g, v)[0], rtol=1e-14, atol=1e-14)


@pytest.mark.parametrize("op", [
    lambda x: ad.sum_(ad.mul(ad.softmax(x, axis=0), np.arange(6.0).reshape(2, 3))),
    lambda x: ad.sum_(ad.transpose(x, (1, 0))[1:] * 3.0),
    lambda x: ad.sum_(ad.flip(x, 1) * np.arange(6.0).reshape(2, 3)),
    lambda x: ad.dot(ad.reshape(x, (-1,)), np.arange(6.0)),
    lambda x: ad.sum_(ad.stack([x, x * x], axis=0)),
    lambda x: ad.sum_(ad.concat([x, ad.exp(x)], axis=1)),
    lambda x: ad.mean(ad.take(x, np.array([0, 0, 5, 2]))),
    lambda x: ad.sum_(ad.getitem(x, (slice(None), np.array([0, 2, 2]))) * 2.0),
    lambda x: ad.sum_(1.0 / (2.0 + x) - x),
])
def test_primitive_gradients(op):
    x = np.random.default_rng(3).uniform(0.2, 1.0, size=(2, 3))
    g = grad_of(op, x)[0]
    fd = ad.finite_difference(lambda v: ad.value(op(v)), x)
    assert ad.relative_error(g, fd).max() < 1e-6


def test_relative_error_floor():
    assert ad.relative_error(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(0.1)
    assert ad.relative_error(np.array([2.0]), np.array([1.0]))[0] == 0.5


def test_gradcheck_report_pass_threshold():
    assert ad.GradCheckReport("x", 9e-5, 0, 1e-5).passed()
    assert not ad.GradCheckReport("x", 1e-4, 0, 1e-5).passed()


@pytest.mark.parametrize("scope", gradcheck.SCOPES)
def test_gradcheck_scopes_pass(scope):
    reports = gradcheck.run_gradcheck(scope, instances=5, seed=3)
    assert reports and all(r.passed() for r in reports), reports


def test_gradcheck_loss_scope_covers_every_loss():
    names = set(gradcheck.CHECKS["losses"])
    assert {"ce_ohem", "lovasz_softmax", "boundary_ce", "geometric_mse", "tv_loss", "d_loss",
            "aux_loss", "composite_total"} <= names


def test_gradcheck_corrupt_hook_fails():
    reports = gradcheck.run_gradcheck("goad", instances=2, corrupt=True)
    assert not any(r.passed() for r in reports)


def test_gradcheck_unknown_scope():
    with pytest.raises(ValueError):
        gradcheck.run_gradcheck("everything")


def test_tape_op_on_plain_arrays_records_nothing():
    out = ad.add(np.ones(2), 3.0)
    assert isinstance(out, np.ndarray) and not ad.is_var(out)
    assert math.isclose(float(ad.sigmoid(0.0)), 0.5)
