import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stagefgl.errors import DegenerateInput, EvaluationError, InvalidArgument
from stagefgl.layers import registered_layers
from stagefgl.numcore import (Identity, Linear, ParamStore, SoftmaxCrossEntropy, cosine_similarity,
                              finite_diff_grad, grad_check, softmax_rows)


def test_softmax_two_entries():
    # e / (1 + e) and 1 / (1 + e)
    np.testing.assert_allclose(softmax_rows([[1.0, 0.0]], 1.0), [[0.731059, 0.268941]], atol=1e-6)


@pytest.mark.parametrize("c,t", [(0.0, 1.0), (-7.5, 0.01), (1e3, 50.0)])
def test_softmax_equal_logits_uniform(c, t):
    np.testing.assert_allclose(softmax_rows([[c, c, c]], t), [[1 / 3] * 3], atol=1e-12)


def test_softmax_high_temperature_is_uniform():
    p = softmax_rows([[1.0, 0.0]], 1e6)
    assert np.all(np.abs(p - 0.5) < 1e-6)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_softmax_rejects_bad_temperature(t):
    with pytest.raises(InvalidArgument):
        softmax_rows([[1.0, 2.0]], t)


def test_softmax_rejects_nan():
    with pytest.raises(InvalidArgument):
        softmax_rows([[np.nan, 0.0]])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)), st.floats(1e-3, 1e6))
def test_softmax_rows_on_simplex(logits, t):
    p = softmax_rows(logits, t)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 100), st.floats(1.01, 10))
def test_softmax_max_prob_decreases_with_temperature(a, b, t, factor):
    if abs(a - b) < 1e-3 or abs(a - b) / t > 30:
        return
    lo = softmax_rows([[a, b]], t).max()
    hi = softmax_rows([[a, b]], t * factor).max()
    assert hi < lo


def test_cosine_examples():
    assert cosine_similarity([3, 4], [3, 4]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == pytest.approx(0.0)
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(0.707107, abs=1e-6)


def test_cosine_zero_norm():
    with pytest.raises(DegenerateInput):
        cosine_similarity([0, 0], [1, 0])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-10, 10)),
       arrays(np.float64, 5, elements=st.floats(-10, 10)), st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(a, b, lam):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    c = cosine_similarity(a, b)
    assert -1 <= c <= 1
    assert c == pytest.approx(cosine_similarity(b, a), abs=1e-12)
    assert cosine_similarity(lam * a, b) == pytest.approx(c, abs=1e-9)


def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-4)
    assert g[0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_constant():
    g = finite_diff_grad(lambda x: 4.2, np.arange(5.0))
    np.testing.assert_array_equal(g, np.zeros(5))


def test_finite_diff_softmax_jacobian():
    def f(x):
        return float(softmax_rows([[x[0], 0.0]])[0, 0])

    p = softmax_rows([[1.0, 0.0]])[0, 0]
    g = finite_diff_grad(f, np.array([1.0]))
    assert g[0] == pytest.approx(p * (1 - p), abs=1e-6)


def test_finite_diff_nan_raises():
    with pytest.raises(EvaluationError):
        finite_diff_grad(lambda x: float("nan"), np.zeros(2))


def test_grad_check_linear():
    assert grad_check(Linear(4, 3, rng=np.random.default_rng(0)), (5, 4), seed=0) < 1e-6


def test_grad_check_identity_exact():
    assert grad_check(Identity(), (3, 4), seed=0) == pytest.approx(0.0, abs=1e-9)


def test_grad_check_softmax_cross_entropy():
    head = SoftmaxCrossEntropy(4, 3, [0, 2, 1, 1, 0], rng=np.random.default_rng(1))
    assert grad_check(head, (5, 4), seed=1) < 1e-5


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_registered_layer_passes(seed):
    for name, (layer, x) in registered_layers(seed).items():
        assert grad_check(layer, x.shape, seed=seed, x=x) < 1e-4, name


def test_param_store_contract():
    ps = ParamStore()
    ps.add("w", np.ones((2, 3)))
    with pytest.raises(InvalidArgument):
        ps.add("w", np.zeros(1))
    assert ps.grad("w").shape == (2, 3)
    with pytest.raises(InvalidArgument):
        ps.set_value("w", np.zeros((3, 2)))
    ps.accumulate("w", np.full((2, 3), 2.0))
    ps.sgd_step(0.5)
    np.testing.assert_array_equal(ps.value("w"), np.zeros((2, 3)))
    ps.zero_grad()
    assert not ps.grad("w").any()
    assert ps.size() == 6
