import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blrnet import tensor as T
from blrnet.layers import (BinaryWeightDistribution, GaussianActivation,
                           binarize, clt_forward, concrete_sample, map_weights,
                           sample_gaussian, sample_weights)
from blrnet.rng import RngStream
from blrnet.tensor import Tape, Tensor, backward, grad_check


def _dist(logits):
    return BinaryWeightDistribution(
        Tensor(np.asarray(logits, dtype=float), requires_grad=True))


def _logit(p):
    return math.log(p / (1.0 - p))


def enumerate_moments(logits_row, h):
    """Exact mean/variance of z = sum_j B_j h_j over all 2^n weight configs."""
    n = len(logits_row)
    p_minus = 1.0 / (1.0 + np.exp(-np.asarray(logits_row)))
    mean = 0.0
    second = 0.0
    for signs in itertools.product([-1.0, 1.0], repeat=n):
        prob = 1.0
        for s, pm in zip(signs, p_minus):
            prob *= pm if s < 0 else (1.0 - pm)
        z = float(np.dot(signs, h))
        mean += prob * z
        second += prob * z * z
    return mean, second - mean * mean


def test_weight_distribution_moments_identity():
    w = _dist([[0.0, 2.0, -3.0]])
    mean = w.mean().data
    var = w.variance_from_mean(w.mean()).data
    np.testing.assert_allclose(mean * mean + var, 1.0, atol=1e-12)
    assert np.all((mean >= -1) & (mean <= 1))
    assert np.all((var >= 0) & (var <= 1))


def test_clt_forward_half_probabilities():
    # p_minus = 0.5 everywhere: E[B] = 0, V[B] = 1
    w = _dist([[0.0, 0.0]])
    ga = clt_forward(Tensor([[1.0, 1.0]]), w)
    assert ga.mu.data[0, 0] == pytest.approx(0.0)
    assert ga.var.data[0, 0] == pytest.approx(2.0)


def test_clt_forward_enumeration_two_weights():
    # E[B] = 0.9 per weight (p_minus = 0.05), h = [1, -1]
    lg = _logit(0.05)
    w = _dist([[lg, lg]])
    h = np.array([[1.0, -1.0]])
    ga = clt_forward(Tensor(h), w)
    em, ev = enumerate_moments([lg, lg], h[0])
    assert ga.mu.data[0, 0] == pytest.approx(em, abs=1e-12)
    assert ga.var.data[0, 0] == pytest.approx(ev, abs=1e-12)
    assert ga.mu.data[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert ga.var.data[0, 0] == pytest.approx(0.38, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_clt_forward_matches_bruteforce(n, seed):
    rng = np.random.default_rng(seed)
    # mix extreme and moderate probabilities, incl. p_minus in {0.05, 0.95}
    choices = np.array([_logit(0.05), _logit(0.95), 0.0, 1.3, -0.7])
    logits = rng.choice(choices, size=n)
    h = rng.normal(size=n)
    w = _dist(logits.reshape(1, n))
    ga = clt_forward(Tensor(h.reshape(1, n)), w)
    em, ev = enumerate_moments(logits, h)
    assert ga.mu.data[0, 0] == pytest.approx(em, abs=1e-10)
    assert ga.var.data[0, 0] == pytest.approx(ev, abs=1e-10)


def test_clt_forward_conv_matches_dense_enumeration():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(1, 1, 2, 2))
    h = rng.normal(size=(1, 1, 2, 2))
    w = BinaryWeightDistribution(Tensor(logits, requires_grad=True), "conv2d")
    ga = clt_forward(Tensor(h), w)
    em, ev = enumerate_moments(logits.reshape(-1), h.reshape(-1))
    assert ga.mu.data.reshape(-1)[0] == pytest.approx(em, abs=1e-10)
    assert ga.var.data.reshape(-1)[0] == pytest.approx(ev, abs=1e-10)


def test_binarize_values():
    ga = GaussianActivation(Tensor(np.array([0.0, 1.0, 5.0])),
                            Tensor(np.array([1.0, 1.0, 0.01])))
    q = binarize(ga).q.data
    assert q[0] == pytest.approx(0.5)
    assert q[1] == pytest.approx(0.5 * math.erfc(1 / math.sqrt(2)), abs=1e-7)
    assert q[2] == 0.0  # saturation: P(+1) = 1 within fp64


def test_concrete_sample_midpoint():
    # q = 0.5 with logistic noise L = 0 gives exactly 0

    class ZeroNoise(RngStream):
        def uniform(self, shape):
            return np.full(shape, 0.5)

    bad = binarize(GaussianActivation(Tensor(np.zeros(3)), Tensor(np.ones(3))))
    out = concrete_sample(bad, tau=1.0, rng=ZeroNoise(0))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-15)


def test_concrete_sample_low_temperature_frequencies():
    n = 10**5
    q = 0.2
    bad = type("B", (), {"q": Tensor(np.full(n, q))})()
    out = concrete_sample(bad, tau=0.01, rng=RngStream(3))
    frac_pos = (out.data > 0).mean()
    sigma = math.sqrt(q * (1 - q) / n)
    assert abs(frac_pos - (1 - q)) < 3 * sigma


def test_concrete_sample_open_interval():
    # strictly inside (-1, 1) at moderate temperature (fp64 saturates only
    # for tau << 1)
    bad = type("B", (), {"q": Tensor(np.full(10**4, 0.3))})()
    out = concrete_sample(bad, tau=0.5, rng=RngStream(8)).data
    assert np.all((out > -1) & (out < 1))


def test_concrete_sample_gradient_wrt_q():
    u = RngStream(11).uniform(4)

    class FixedNoise(RngStream):
        def uniform(self, shape):
            return u

    def fn(p):
        bad = type("B", (), {"q": p[0]})()
        return T.tsum(concrete_sample(bad, tau=1.0, rng=FixedNoise(0)))

    assert grad_check(fn, [np.array([0.3, 0.5, 0.7, 0.9])]) < 1e-5


def test_concrete_sample_rejects_bad_temperature():
    bad = type("B", (), {"q": Tensor(np.array([0.5]))})()
    with pytest.raises(ValueError):
        concrete_sample(bad, tau=0.0, rng=RngStream(0))


def test_sample_gaussian_zero_variance():
    mu = np.array([1.0, -2.0])
    ga = GaussianActivation(Tensor(mu), Tensor(np.zeros(2)))
    out = sample_gaussian(ga, RngStream(0))
    np.testing.assert_array_equal(out.data, mu)


def test_sample_gaussian_moments():
    n = 10**5
    ga = GaussianActivation(Tensor(np.full(n, 2.0)), Tensor(np.full(n, 4.0)))
    out = sample_gaussian(ga, RngStream(5)).data
    assert abs(out.mean() - 2.0) < 3 * 2.0 / math.sqrt(n)


def test_sample_gaussian_reproducible():
    ga = GaussianActivation(Tensor(np.zeros(10)), Tensor(np.ones(10)))
    a = sample_gaussian(ga, RngStream(9)).data
    b = sample_gaussian(ga, RngStream(9)).data
    np.testing.assert_array_equal(a, b)


def test_sample_weights_near_deterministic():
    lg = _logit(1 - 1e-7)
    w = _dist(np.full((1, 100), lg))
    s = sample_weights(w, RngStream(0))
    assert np.all(s == -1.0)


def test_sample_weights_frequencies_and_codomain():
    w = _dist(np.zeros((1, 10**5)))
    s = sample_weights(w, RngStream(1))
    assert set(np.unique(s)) <= {-1.0, 1.0}
    assert abs((s == -1).mean() - 0.5) < 3 * 0.5 / math.sqrt(10**5)


def test_map_weights_tie_and_signs():
    w = _dist([[0.0, -3.0, 3.0]])
    np.testing.assert_array_equal(map_weights(w), [[1.0, 1.0, -1.0]])


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_map_weights_maximizes_likelihood(n, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(1, n)) * 2
    w = _dist(logits)
    p_minus = 1 / (1 + np.exp(-logits[0]))
    best_ll, best = -np.inf, None
    for signs in itertools.product([-1.0, 1.0], repeat=n):
        ll = sum(math.log(pm if s < 0 else 1 - pm)
                 for s, pm in zip(signs, p_minus))
        if ll > best_ll:
            best_ll, best = ll, signs
    got = map_weights(w)[0]
    got_ll = sum(math.log(pm if s < 0 else 1 - pm)
                 for s, pm in zip(got, p_minus))
    assert got_ll == pytest.approx(best_ll)


def test_binarize_matches_gaussian_sign_distribution():
    # empirical sign of mu + sigma*eps matches Bern+-(q) from binarize
    n = 10**5
    mu, var = 0.4, 1.5
    ga = GaussianActivation(Tensor(np.full(n, mu)), Tensor(np.full(n, var)))
    q = binarize(ga).q.data[0]
    frac_neg = (sample_gaussian(ga, RngStream(21)).data <= 0).mean()
    sigma = math.sqrt(q * (1 - q) / n)
    assert abs(frac_neg - q) < 3 * sigma


def test_composite_layer_gradient():
    # clt_forward -> binarize -> concrete_sample w.r.t. logits, frozen noise
    h = np.random.default_rng(2).normal(size=(2, 3))
    u = RngStream(4).uniform((2, 2))

    class FixedNoise(RngStream):
        def uniform(self, shape):
            return u

    def fn(p):
        w = BinaryWeightDistribution(p[0])
        ga = clt_forward(Tensor(h), w)
        return T.tsum(T.square(concrete_sample(binarize(ga), 1.0, FixedNoise(0))))

    logits = np.random.default_rng(3).normal(size=(2, 3))
    assert grad_check(fn, [logits]) < 1e-4
