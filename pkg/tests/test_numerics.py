import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from factorrec.numerics import (
    AdamState,
    DomainError,
    SeededRng,
    ShapeError,
    adam_step,
    cosine,
    cosine_rows,
    cosine_rows_backward,
    gaussian_kl,
    grad_check,
    logsumexp,
    reparam_sample,
    softmax_temp,
)


def test_softmax_uniform():
    np.testing.assert_allclose(softmax_temp([0.5, 0.5, 0.5, 0.5], 0.1), [0.25] * 4)


def test_softmax_sharpened():
    # oracle: direct evaluation of exp(x/0.1) / sum
    e = [math.exp(1.0 / 0.1), *[math.exp(0.5 / 0.1)] * 3]
    expect = [x / sum(e) for x in e]
    got = softmax_temp([1.0, 0.5, 0.5, 0.5], 0.1)
    np.testing.assert_allclose(got, expect, rtol=1e-12)
    np.testing.assert_allclose(got, [0.9802, 0.0066, 0.0066, 0.0066], atol=1e-4)


@pytest.mark.parametrize("gamma", [0.0, -1.0])
def test_softmax_rejects_bad_temperature(gamma):
    with pytest.raises(DomainError):
        softmax_temp([1.0, 2.0], gamma)


@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-1, 1)))
def test_softmax_argmax_stable_across_gamma(x):
    a = softmax_temp(x, 0.1)
    b = softmax_temp(x, 1.0)
    assert abs(a.sum() - 1) < 1e-9
    assert np.argmax(a) == np.argmax(b) or math.isclose(x[np.argmax(a)], x[np.argmax(b)])


def test_softmax_no_overflow():
    p = softmax_temp([1000.0, 0.0], 0.01)
    assert np.all(np.isfinite(p)) and p[0] == 1.0


def test_cosine_examples():
    assert cosine([1, 0], [0, 1]) == 0
    assert cosine([1, 2], [2, 4]) == pytest.approx(1.0)
    assert cosine([0, 0], [1, 1]) == 0.0
    with pytest.raises(ShapeError):
        cosine([1, 2], [1, 2, 3])


def test_cosine_rows_matches_scalar_and_grad():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))
    x[2] = 0.0
    protos = rng.normal(size=(3, 4))
    cos, cache = cosine_rows(x, protos)
    for i in range(5):
        for c in range(3):
            assert cos[i, c] == pytest.approx(cosine(x[i], protos[c]), abs=1e-12)
    w = rng.normal(size=cos.shape)
    dx, dp = cosine_rows_backward(w, cache)

    # the zero row sits on the guard's discontinuity, so probe the others
    keep = [0, 1, 3, 4]

    def f(q):
        return float(np.sum(cosine_rows(q["x"], q["p"])[0] * w[keep]))

    dx_k, dp_k = cosine_rows_backward(np.where(np.isin(np.arange(5), keep)[:, None], w, 0), cache)
    assert grad_check(f, {"x": x[keep], "p": protos}, {"x": dx_k[keep], "p": dp_k}) < 1e-6
    assert np.all(dx[2] == 0)


def test_gaussian_kl_examples():
    assert gaussian_kl([0.0], [1.0]) == 0.0
    assert gaussian_kl([1.0], [1.0]) == pytest.approx(0.5)
    assert gaussian_kl([0.0], [2.0]) == pytest.approx(0.5 * (4 - 1 - 2 * math.log(2)), abs=1e-12)
    assert gaussian_kl([0.0], [2.0]) == pytest.approx(0.8069, abs=1e-4)
    with pytest.raises(DomainError):
        gaussian_kl([0.0], [0.0])


def test_reparam():
    mu = np.array([1.0, -2.0])
    np.testing.assert_array_equal(reparam_sample(mu, np.ones(2), eps=np.zeros(2)), mu)
    tiny = reparam_sample(mu, np.full(2, 1e-5), rng=SeededRng(0))
    assert np.max(np.abs(tiny - mu)) < 1e-3
    a = reparam_sample(mu, np.ones(2), rng=SeededRng(7))
    b = reparam_sample(mu, np.ones(2), rng=SeededRng(7))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(DomainError):
        reparam_sample(mu, np.array([1.0, -1.0]), eps=np.zeros(2))


def test_seeded_streams_independent_and_repeatable():
    r = SeededRng(5)
    assert not np.array_equal(r.spawn(0).normal(4), r.spawn(1).normal(4))
    np.testing.assert_array_equal(SeededRng(5).spawn(3).normal(4), SeededRng(5, (3,)).normal(4))


def test_adam_first_step():
    params = {"w": np.zeros(1)}
    new, state = adam_step(params, {"w": np.ones(1)}, AdamState.fresh(params), 0.001)
    # bias-corrected first step: lr * g / (|g| + eps)
    assert new["w"][0] == pytest.approx(-0.001 * 1.0 / (1.0 + 1e-8), rel=1e-12)
    assert state.step_count == 1
    assert params["w"][0] == 0.0


def test_adam_zero_grad_and_purity():
    params = {"w": np.array([0.3, -0.2])}
    st0 = AdamState.fresh(params)
    new, _ = adam_step(params, {"w": np.zeros(2)}, st0, 0.1)
    np.testing.assert_array_equal(new["w"], params["w"])
    g = {"w": np.array([1.0, 2.0])}
    a = adam_step(params, g, st0.copy(), 0.1)
    b = adam_step(params, g, st0.copy(), 0.1)
    np.testing.assert_array_equal(a[0]["w"], b[0]["w"])
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros(3)}, st0, 0.1)
    with pytest.raises(DomainError):
        adam_step(params, g, st0, 0.0)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(1)
    theta = rng.normal(size=3)
    params = {"w": theta.copy()}
    state = AdamState.fresh(params)
    m = np.zeros(3)
    v = np.zeros(3)
    for t in range(1, 6):
        g = rng.normal(size=3)
        params, state = adam_step(params, {"w": g}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["w"], theta, rtol=1e-12)


def test_grad_check_harness():
    f = lambda q: float(q["x"][0] ** 2)
    assert grad_check(f, {"x": np.array([3.0])}, {"x": np.array([6.0])}) < 1e-6
    assert grad_check(f, {"x": np.array([3.0])}, {"x": np.array([12.0])}) == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(DomainError):
        grad_check(f, {"x": np.array([3.0])}, {"x": np.array([6.0])}, h=0.1)
    with pytest.raises(FloatingPointError):
        grad_check(lambda q: float("nan"), {"x": np.array([3.0])}, {"x": np.array([6.0])})


@settings(max_examples=50)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
def test_logsumexp(x):
    ref = np.log(np.sum(np.exp(x - x.max(axis=1, keepdims=True)), axis=1)) + x.max(axis=1)
    np.testing.assert_allclose(logsumexp(x, axis=1), ref, rtol=1e-12)
