import copy
import math

import numpy as np
import pytest

from blrnet.export import (CoverageCurve, Ensemble, combine_log_softmax,
                           det_forward, ensemble_predict, error_coverage,
                           export, member_log_softmax, reestimate_bn,
                           uncertainty_statistic)
from blrnet.model import ModelSpec, build_stochastic
from blrnet.rng import RngStream
from blrnet.tensor import log_softmax

RNG = np.random.default_rng(31)


def _net(arch="4C3-MP2-8FC-SM3", shape=(1, 8, 8), seed=0, batchnorm=True):
    spec = ModelSpec(arch, input_shape=shape, batchnorm=batchnorm)
    net = build_stochastic(spec, RngStream(seed))
    # give running stats non-default values so eval BN is exercised
    for blk in net.blocks:
        if blk.bn is not None:
            blk.bn.running_mean += RNG.normal(size=blk.bn.running_mean.shape)
            blk.bn.running_var += RNG.random(blk.bn.running_var.shape)
    return net


def test_export_map_deterministic():
    net = _net()
    a = export(net, "map")
    b = export(net, "map")
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.weight, lb.weight)


def test_export_sample_seed_behavior():
    net = _net()
    a = export(net, "sample", RngStream(5))
    b = export(net, "sample", RngStream(5))
    c = export(net, "sample", RngStream(6))
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.weight, lb.weight)
    assert any(not np.array_equal(la.weight, lc.weight)
               for la, lc in zip(a.layers, c.layers))


def test_export_preserves_shapes_and_codomain():
    net = _net()
    det = export(net, "map")
    for blk, lyr in zip(net.blocks, det.layers):
        assert lyr.weight.shape == blk.weight.shape
        assert set(np.unique(lyr.weight)) <= {-1.0, 1.0}


def test_export_sample_frequencies():
    p = 0.05
    logits = np.full((1, 10**5), math.log(p / (1 - p)))
    spec = ModelSpec("1FC-SM1", input_shape=(1, 1, 1))
    net = build_stochastic(spec, RngStream(0))
    net.blocks[0].weight.data = logits  # widen the layer artificially
    net.blocks[0].weight.data = logits
    from blrnet.layers import BinaryWeightDistribution, sample_weights
    w = BinaryWeightDistribution(net.blocks[0].weight)
    s = sample_weights(w, RngStream(9))
    frac = (s == -1).mean()
    assert abs(frac - p) < 3 * math.sqrt(p * (1 - p) / 10**5)


def test_det_forward_integer_dot_products():
    # single dense binary layer without BN: hidden signs of integer dots
    spec = ModelSpec("4FC-SM2", input_shape=(3, 1, 1), batchnorm=False)
    net = build_stochastic(spec, RngStream(2))
    det = export(net, "map")
    x = np.array([[1.0, -1.0, 1.0]])
    z = x @ det.layers[0].weight.T
    assert np.all(z == np.round(z))  # integer dot products
    h = np.where(z >= 0, 1.0, -1.0)
    expect = h @ det.softmax_w.T + det.softmax_b
    np.testing.assert_allclose(det_forward(det, x), expect, atol=1e-12)


def test_det_forward_sign_zero_convention():
    # beta = 0 and all-zero input: post-BN value is 0 -> b_det(0) = +1
    spec = ModelSpec("4FC-SM2", input_shape=(3, 1, 1))
    net = build_stochastic(spec, RngStream(2))
    det = export(net, "map")
    for lyr in det.layers:
        lyr.bn.beta[:] = 0.0
    x = np.zeros((1, 3))
    logits = det_forward(det, x)
    h_expect = np.ones((1, 4))  # all pre-activations 0 -> all +1
    np.testing.assert_allclose(
        logits, h_expect @ det.softmax_w.T + det.softmax_b, atol=1e-12)


def test_reestimate_bn_momentum_one_single_batch():
    net = _net()
    det = export(net, "map")
    batch = RNG.normal(size=(16, 1, 8, 8))
    reestimate_bn(det, [batch], momentum=1.0)
    # layer-0 statistics equal that batch's statistics exactly
    from blrnet.export import _linear
    z = _linear(det.layers[0], batch)
    np.testing.assert_array_equal(det.layers[0].bn.mean, z.mean(axis=(0, 2, 3)))
    np.testing.assert_array_equal(det.layers[0].bn.var,
                                  z.var(axis=(0, 2, 3), ddof=1))


def test_reestimate_bn_fixed_point():
    net = _net()
    det = export(net, "map")
    batch = RNG.normal(size=(16, 1, 8, 8))
    reestimate_bn(det, [batch], momentum=1.0)
    before = [(l.bn.mean.copy(), l.bn.var.copy()) for l in det.layers]
    reestimate_bn(det, [batch], momentum=0.1)
    for (m0, v0), lyr in zip(before, det.layers):
        assert np.abs(lyr.bn.mean - m0).max() < 1e-6
        assert np.abs(lyr.bn.var - v0).max() < 1e-6


def test_reestimate_bn_leaves_weights_untouched():
    net = _net()
    det = export(net, "map")
    snap = copy.deepcopy(det)
    reestimate_bn(det, [RNG.normal(size=(8, 1, 8, 8))])
    for a, b in zip(det.layers, snap.layers):
        assert a.weight.tobytes() == b.weight.tobytes()
        assert a.bn.gamma.tobytes() == b.bn.gamma.tobytes()
        assert a.bn.beta.tobytes() == b.bn.beta.tobytes()


def test_reestimate_bn_requires_batches():
    det = export(_net(), "map")
    with pytest.raises(ValueError):
        reestimate_bn(det, [])


def test_ensemble_identical_members_equal_single():
    det = export(_net(), "map")
    x = RNG.normal(size=(6, 1, 8, 8))
    single = member_log_softmax(det, x).argmax(axis=1)
    pred, _ = ensemble_predict(Ensemble([det, det, det]), x)
    np.testing.assert_array_equal(pred, single)


def test_ensemble_one_member_is_single_argmax():
    det = export(_net(seed=4), "map")
    x = RNG.normal(size=(5, 1, 8, 8))
    pred, ls = ensemble_predict(Ensemble([det]), x)
    np.testing.assert_array_equal(pred, ls[0].argmax(axis=1))


def test_ensemble_tie_breaks_to_lowest_class():
    member_ls = np.array([[[-0.1, -2.4]], [[-2.4, -0.1]]])
    assert combine_log_softmax(member_ls)[0] == 0


def test_ensemble_sum_against_hand_oracle():
    member_ls = RNG.normal(size=(3, 4, 3))
    got = combine_log_softmax(member_ls)
    for i in range(4):
        totals = [sum(member_ls[m, i, k] for m in range(3)) for k in range(3)]
        assert got[i] == int(np.argmax(totals))


def test_empty_ensemble_rejected():
    with pytest.raises(ValueError):
        Ensemble([])


def test_uncertainty_single_net_max_softmax():
    ls = log_softmax(np.array([[100.0, 0.0, 0.0]]))[None]  # one-hot softmax
    score = uncertainty_statistic(ls, np.array([0]))
    assert score[0] == pytest.approx(1.0)


def test_uncertainty_identical_members_zero_variance():
    ls = np.log(np.full((3, 2, 2), 0.5))
    score = uncertainty_statistic(ls, np.array([0, 1]))
    np.testing.assert_allclose(score, 0.0, atol=1e-15)


def test_uncertainty_two_member_variance():
    # top-class probs 0.6 and 0.8 -> sample variance (n-1) = 0.02
    ls = np.log(np.array([[[0.6, 0.4]], [[0.8, 0.2]]]))
    score = uncertainty_statistic(ls, np.array([0]))
    assert score[0] == pytest.approx(-0.02)


def test_error_coverage_all_correct():
    curve = error_coverage(RNG.random(50), np.ones(50, dtype=bool))
    assert all(err == 0.0 for _, err in curve.points)


def test_error_coverage_small_case():
    curve = error_coverage(np.array([3.0, 2.0, 1.0]),
                           np.array([True, True, False]),
                           grid=np.array([2 / 3, 1.0]))
    by_cov = dict(curve.points)
    assert by_cov[2 / 3] == 0.0
    assert by_cov[1.0] == pytest.approx(1 / 3)


def test_error_coverage_full_coverage_is_error_rate():
    correct = RNG.random(333) > 0.3
    curve = error_coverage(RNG.random(333), correct)
    assert curve.points[0][0] == 1.0
    assert curve.points[0][1] == pytest.approx(1 - correct.mean())


def test_error_coverage_against_bruteforce_recount():
    n = 1000
    scores = RNG.random(n)
    correct = RNG.random(n) > 0.2
    grid = np.linspace(0.01, 1.0, 100)
    curve = error_coverage(scores, correct, grid)
    order = np.argsort(-scores, kind="stable")
    for c, err in curve.points:
        k = int(np.ceil(c * n))
        top = order[:k]
        assert err == pytest.approx((~correct[top]).mean(), abs=0)


def test_error_coverage_rejects_empty():
    with pytest.raises(ValueError):
        error_coverage(np.array([]), np.array([], dtype=bool))


def test_coverage_curve_monotone_coverage_invariant():
    with pytest.raises(ValueError):
        CoverageCurve([(0.5, 0.1), (0.5, 0.2)])
