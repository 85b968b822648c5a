"""Deterministic binary networks: export, evaluation, ensembles, coverage.

Everything here is plain numpy (no gradient tape): the test-time artifact is
a net of +-1 weights, folded BN statistics, and a real softmax layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import BinaryWeightDistribution, map_weights, sample_weights
from .model import StochasticNet
from .rng import RngStream
from .tensor import ShapeError, _im2col, log_softmax, pool_windows


@dataclass
class DetBN:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5


@dataclass
class DetLayer:
    kind: str                 # dense | conv2d
    weight: np.ndarray        # strictly +-1
    bn: DetBN | None
    pool: int | None          # window size (stride == window) or None
    stride: int = 1
    pad: int = 0
    bias: np.ndarray | None = None


@dataclass
class DeterministicBinaryNet:
    arch: str
    input_shape: tuple[int, int, int]
    layers: list[DetLayer]
    softmax_w: np.ndarray
    softmax_b: np.ndarray
    bn_reestimated: bool = False

    def __post_init__(self):
        for lyr in self.layers:
            if not np.all(np.abs(lyr.weight) == 1.0):
                raise ValueError("binary layer weights must be +-1")


@dataclass
class Ensemble:
    members: list[DeterministicBinaryNet]

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")


def export(net: StochasticNet, mode: str = "map",
           rng: RngStream | None = None) -> DeterministicBinaryNet:
    """Draw a deterministic +-1 net from the weight distribution.

    mode "map" takes each weight's most probable value; "sample" draws one
    instantiation (requires rng). BN statistics are copied from the running
    estimates; call reestimate_bn afterwards for best sampled-net accuracy.
    """
    if mode not in ("map", "sample"):
        raise ValueError(f"unknown export mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample export needs an rng")
    layers = []
    for blk in net.blocks:
        dist = BinaryWeightDistribution(blk.weight, blk.kind,
                                        stride=blk.stride, pad=blk.pad)
        w = map_weights(dist) if mode == "map" else sample_weights(dist, rng)
        bn = None
        if blk.bn is not None:
            bn = DetBN(blk.bn.gamma.data.copy(), blk.bn.beta.data.copy(),
                       blk.bn.running_mean.copy(), blk.bn.running_var.copy(),
                       blk.bn.eps)
        layers.append(DetLayer(blk.kind, w, bn,
                               blk.pool.window if blk.pool else None,
                               stride=blk.stride, pad=blk.pad,
                               bias=None if blk.bias is None
                               else blk.bias.data.copy()))
    return DeterministicBinaryNet(net.spec.arch, net.spec.input_shape, layers,
                                  net.softmax_w.data.copy(),
                                  net.softmax_b.data.copy())


def _linear(lyr: DetLayer, h: np.ndarray) -> np.ndarray:
    if lyr.kind == "dense":
        if h.ndim == 4:
            h = h.reshape(h.shape[0], -1)
        z = h @ lyr.weight.T
        if lyr.bias is not None:
            z = z + lyr.bias
    else:
        cols, ho, wo = _im2col(h, lyr.weight.shape[2], lyr.weight.shape[3],
                               lyr.stride, lyr.pad)
        o = lyr.weight.shape[0]
        z = (cols @ lyr.weight.reshape(o, -1).T).transpose(0, 2, 1)
        z = z.reshape(h.shape[0], o, ho, wo)
        if lyr.bias is not None:
            z = z + lyr.bias.reshape(1, -1, 1, 1)
    return z


def _apply_bn(z: np.ndarray, bn: DetBN) -> np.ndarray:
    shape = (1, -1) if z.ndim == 2 else (1, -1, 1, 1)
    g = bn.gamma.reshape(shape)
    b = bn.beta.reshape(shape)
    m = bn.mean.reshape(shape)
    v = bn.var.reshape(shape)
    return g * (z - m) / np.sqrt(v + bn.eps) + b


def _det_pool(z: np.ndarray, window: int) -> np.ndarray:
    return pool_windows(z, window).max(axis=-1)


def b_det(z: np.ndarray) -> np.ndarray:
    """Sign binarization with b_det(0) = +1."""
    return np.where(z >= 0, 1.0, -1.0)


def det_forward(net: DeterministicBinaryNet, x: np.ndarray) -> np.ndarray:
    """Reference float forward pass: linear -> BN -> pool -> sign per layer."""
    h = np.asarray(x, dtype=np.float64)
    for lyr in net.layers:
        z = _linear(lyr, h)
        if lyr.bn is not None:
            z = _apply_bn(z, lyr.bn)
        if lyr.pool is not None:
            z = _det_pool(z, lyr.pool)
        h = b_det(z)
    if h.ndim == 4:
        h = h.reshape(h.shape[0], -1)
    return h @ net.softmax_w.T + net.softmax_b


def reestimate_bn(net: DeterministicBinaryNet,
                  batches: list[np.ndarray],
                  momentum: float = 0.1) -> DeterministicBinaryNet:
    """Refresh BN statistics by running training batches through the net.

    Per batch and BN layer, the per-channel mean and sample variance of the
    pre-BN activations update a moving estimator (new = (1-m)*old + m*batch).
    The forward pass during collection normalizes with the batch statistics.
    Weights, gamma, and beta are untouched.
    """
    if not batches:
        raise ValueError("need at least one batch to re-estimate statistics")
    for x in batches:
        h = np.asarray(x, dtype=np.float64)
        for lyr in net.layers:
            z = _linear(lyr, h)
            if lyr.bn is not None:
                axes = (0,) if z.ndim == 2 else (0, 2, 3)
                bm = z.mean(axis=axes)
                bv = z.var(axis=axes, ddof=1)
                lyr.bn.mean = (1 - momentum) * lyr.bn.mean + momentum * bm
                lyr.bn.var = (1 - momentum) * lyr.bn.var + momentum * bv
                shape = (1, -1) if z.ndim == 2 else (1, -1, 1, 1)
                z = (lyr.bn.gamma.reshape(shape) * (z - bm.reshape(shape))
                     / np.sqrt(bv.reshape(shape) + lyr.bn.eps)
                     + lyr.bn.beta.reshape(shape))
            if lyr.pool is not None:
                z = _det_pool(z, lyr.pool)
            h = b_det(z)
    net.bn_reestimated = True
    return net


def member_log_softmax(net: DeterministicBinaryNet,
                       x: np.ndarray) -> np.ndarray:
    return log_softmax(det_forward(net, x))


def combine_log_softmax(member_ls: np.ndarray) -> np.ndarray:
    """Classes from member-summed log-softmax; ties break to lowest index."""
    return member_ls.sum(axis=0).argmax(axis=1)


def ensemble_predict(e: Ensemble, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(predicted classes, per-member log-softmax of shape (M, N, K))."""
    member_ls = np.stack([member_log_softmax(m, x) for m in e.members])
    return combine_log_softmax(member_ls), member_ls


def uncertainty_statistic(member_log_softmax_scores: np.ndarray,
                          predicted: np.ndarray) -> np.ndarray:
    """Per-sample certainty score, higher = more certain.

    Single net (one member): the top softmax probability. Ensemble: the
    negated sample variance (n-1 denominator) across members of the
    predicted class's softmax probability.
    """
    ls = member_log_softmax_scores
    if ls.ndim != 3:
        raise ShapeError("expected (members, samples, classes) scores")
    n = ls.shape[1]
    top_probs = np.exp(ls[:, np.arange(n), predicted])  # (M, N)
    if ls.shape[0] == 1:
        return top_probs[0]
    return -top_probs.var(axis=0, ddof=1)


@dataclass
class CoverageCurve:
    points: list[tuple[float, float]]  # (coverage, error), coverage descending

    def __post_init__(self):
        covs = [c for c, _ in self.points]
        if any(b >= a for a, b in zip(covs, covs[1:])):
            raise ValueError("coverage values must be strictly decreasing")


def error_coverage(scores: np.ndarray, correct: np.ndarray,
                   grid: np.ndarray | None = None) -> CoverageCurve:
    """Error rate among the most-confident top-c fraction, per grid point.

    Sorting is stable descending by score (ties keep input order); each
    coverage c keeps the top ceil(c*N) samples.
    """
    scores = np.asarray(scores, dtype=float)
    correct = np.asarray(correct, dtype=bool)
    if scores.size == 0:
        raise ValueError("empty inputs")
    if scores.shape != correct.shape:
        raise ShapeError("scores and correctness flags must align")
    if grid is None:
        grid = np.linspace(0.01, 1.0, 100)
    order = np.argsort(-scores, kind="stable")
    errors = ~correct[order]
    cum_err = np.cumsum(errors)
    n = scores.size
    points = []
    for c in sorted(set(float(g) for g in grid), reverse=True):
        k = int(np.ceil(c * n))
        if k < 1 or k > n:
            raise ValueError(f"coverage {c} out of range")
        points.append((c, cum_err[k - 1] / k))
    return CoverageCurve(points)
