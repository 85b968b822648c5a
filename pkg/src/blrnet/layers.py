"""Binary weight distributions and the stochastic layer math.

A layer holds one logit per binary weight: p(B = -1) = sigmoid(W). The linear
map propagates the first two moments of B through the layer (central limit
theorem), giving a Gaussian over pre-activations. Binarizing that Gaussian
yields a Bernoulli over {-1,+1}, sampled during training with the
Binary-Concrete relaxation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor

# q is kept inside [Q_CLAMP, 1-Q_CLAMP] before taking odds, so log(alpha)
# stays finite.
Q_CLAMP = 1e-7


class BinaryWeightDistribution:
    """Factorized distribution over {-1,+1} weights, one logit each.

    logits shape: (out, in) for dense, OIHW for conv.
    """

    def __init__(self, logits: Tensor, kind: str = "dense",
                 stride: int = 1, pad: int = 0):
        if kind not in ("dense", "conv2d"):
            raise ValueError(f"unknown layer kind {kind!r}")
        if kind == "dense" and logits.ndim != 2:
            raise T.ShapeError("dense logits must be (out, in)")
        if kind == "conv2d" and logits.ndim != 4:
            raise T.ShapeError("conv logits must be OIHW")
        self.logits = logits
        self.kind = kind
        self.stride = stride
        self.pad = pad

    @property
    def shape(self):
        return self.logits.shape

    def p_minus(self) -> Tensor:
        return T.sigmoid(self.logits)

    def mean(self) -> Tensor:
        # E[B] = (+1)(1-p) + (-1)p = 1 - 2p
        return 1.0 - 2.0 * self.p_minus()

    def variance_from_mean(self, mean: Tensor) -> Tensor:
        # V[B] = 1 - E[B]^2 for +-1 variables
        return 1.0 - T.square(mean)


@dataclass
class GaussianActivation:
    """Independent Gaussian pre-activations: matching mean/variance tensors."""
    mu: Tensor
    var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.var.shape:
            raise T.ShapeError(
                f"mu/var shapes differ: {self.mu.shape} vs {self.var.shape}")


@dataclass
class BinaryActivationDistribution:
    """Per-element q = P(a = -1) on {-1,+1}."""
    q: Tensor


def clt_forward(h: Tensor, w: BinaryWeightDistribution,
                bias: Tensor | None = None) -> GaussianActivation:
    """Propagate input h through the layer's moment maps.

    mu = f(E[B], h), sigma^2 = f(V[B], h^2) with f the layer's linear map.
    Dense input is (N, in); conv input is NCHW. Bias (real-valued) adds to
    mu only.
    """
    mean = w.mean()
    var = w.variance_from_mean(mean)
    if w.kind == "dense":
        mu = T.matmul(h, T.transpose(mean))
        s2 = T.matmul(T.square(h), T.transpose(var))
    else:
        mu = T.conv2d(h, mean, stride=w.stride, pad=w.pad)
        s2 = T.conv2d(T.square(h), var, stride=w.stride, pad=w.pad)
    if bias is not None:
        if w.kind == "dense":
            mu = mu + bias
        else:
            mu = mu + T.reshape(bias, (1, -1, 1, 1))
    return GaussianActivation(mu, s2)


def binarize(ga: GaussianActivation) -> BinaryActivationDistribution:
    """Deterministic sign of a Gaussian: q = P(a <= 0) = Phi(0 | mu, var)."""
    return BinaryActivationDistribution(T.gaussian_cdf_at_zero(ga.mu, ga.var))


def concrete_sample(bad: BinaryActivationDistribution, tau: float,
                    rng: RngStream) -> Tensor:
    """Binary-Concrete sample of Bern+-(q), mapped affinely into (-1, 1).

    With odds alpha = (1-q)/q of +1 and logistic noise L = log u - log(1-u):
    y = sigmoid((log alpha + L)/tau), output = 2y - 1. Differentiable w.r.t.
    q through the reparameterized path (noise treated as constant).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    q = T.clip(bad.q, Q_CLAMP, 1.0 - Q_CLAMP)
    log_alpha = T.log(1.0 - q) - T.log(q)
    u = rng.uniform(q.shape)
    noise = Tensor(np.log(u) - np.log1p(-u))
    y = T.sigmoid((log_alpha + noise) * (1.0 / tau))
    return 2.0 * y - 1.0


def sample_gaussian(ga: GaussianActivation, rng: RngStream) -> Tensor:
    """Reparameterized draw mu + sigma*eps, eps ~ N(0, 1)."""
    eps = Tensor(rng.normal(ga.mu.shape))
    return ga.mu + T.sqrt(ga.var) * eps


def sample_weights(w: BinaryWeightDistribution, rng: RngStream) -> np.ndarray:
    """One +-1 instantiation: -1 with probability p_minus, else +1."""
    p = w.p_minus().data
    return np.where(rng.uniform(p.shape) < p, -1.0, 1.0)


def map_weights(w: BinaryWeightDistribution) -> np.ndarray:
    """Most likely +-1 instantiation; ties (p_minus = 0.5) break to +1."""
    return np.where(w.p_minus().data > 0.5, -1.0, 1.0)
