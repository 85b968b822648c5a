"""Batch normalization and max pooling on Gaussian pre-activations.

Both operate on distributions, not samples: BN normalizes with the expected
population statistics of the batch, pooling propagates the one input
distribution per region whose joint sample is largest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import GaussianActivation
from .rng import RngStream
from .tensor import Tensor


@dataclass
class BNParams:
    """Per-channel affine BN parameters plus running statistics."""
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5
    momentum: float = 0.1
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)   # type: ignore[assignment]

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        c = self.gamma.size
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        return cls(gamma=Tensor(np.ones(channels), requires_grad=True),
                   beta=Tensor(np.zeros(channels), requires_grad=True),
                   eps=eps, momentum=momentum)


@dataclass
class PoolGeometry:
    """Square non-overlapping pooling window (stride equals window size)."""
    window: int = 2

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("pooling window must be positive")


def _chan(t: Tensor, ndim: int) -> Tensor:
    """Broadcast a (C,) tensor against (N,C) or (N,C,H,W)."""
    return t if ndim == 2 else T.reshape(t, (1, -1, 1, 1))


def stoch_batchnorm(ga: GaussianActivation, p: BNParams,
                    mode: str = "train") -> GaussianActivation:
    """Normalize Gaussian pre-activations with expected batch statistics.

    Train mode: E[m] = mean of mu over batch(+spatial) per channel and
    E[v] = (sum(var) + sum((mu - E[m])^2)) / (M - 1), M values per channel.
    Output: mu' = gamma*(mu - E[m])/sqrt(E[v]+eps) + beta,
            var' = gamma^2 * var / (E[v]+eps).
    Eval mode substitutes the running statistics; the op is then a
    deterministic affine map of (mu, var).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown BN mode {mode!r}")
    nd = ga.mu.ndim
    if mode == "train":
        axes = (0,) if nd == 2 else (0, 2, 3)
        m_count = int(np.prod([ga.mu.shape[a] for a in axes]))
        if m_count < 2:
            raise ValueError(f"train-mode BN needs M >= 2 per channel, got {m_count}")
        em = T.tmean(ga.mu, axes=axes, keepdims=True)
        dev2 = T.square(ga.mu - em)
        ev = (T.tsum(ga.var, axes=axes, keepdims=True)
              + T.tsum(dev2, axes=axes, keepdims=True)) * (1.0 / (m_count - 1))
        mom = p.momentum
        p.running_mean = (1 - mom) * p.running_mean + mom * em.data.reshape(-1)
        p.running_var = (1 - mom) * p.running_var + mom * ev.data.reshape(-1)
    else:
        shape = (1, -1) if nd == 2 else (1, -1, 1, 1)
        em = Tensor(p.running_mean.reshape(shape))
        ev = Tensor(p.running_var.reshape(shape))
    g = _chan(p.gamma, nd)
    b = _chan(p.beta, nd)
    denom = ev + p.eps
    mu_out = g * (ga.mu - em) / T.sqrt(denom) + b
    var_out = T.square(g) * ga.var / denom
    return GaussianActivation(mu_out, var_out)


def stoch_maxpool(ga: GaussianActivation, geom: PoolGeometry,
                  rng: RngStream) -> tuple[GaussianActivation, np.ndarray]:
    """Per region: sample every input once, keep the argmax's distribution.

    Returns the pooled distribution and the index map (flat in-window index
    per output position) used for gradient routing. Ties break to the lowest
    linear index.
    """
    if ga.mu.ndim != 4:
        raise T.ShapeError("stoch_maxpool expects NCHW input")
    k = geom.window
    noise = rng.normal(ga.mu.shape)
    samples = ga.mu.data + np.sqrt(np.maximum(ga.var.data, 0.0)) * noise
    idx = np.argmax(T.pool_windows(samples, k), axis=-1)
    out = GaussianActivation(T.pool_gather(ga.mu, idx, k),
                             T.pool_gather(ga.var, idx, k))
    return out, idx


def det_maxpool(x: Tensor, geom: PoolGeometry) -> Tensor:
    """Deterministic max pooling on values (the zero-variance special case)."""
    idx = np.argmax(T.pool_windows(x.data, geom.window), axis=-1)
    return T.pool_gather(x, idx, geom.window)


def pool_prob_mc(region: list[tuple[float, float]], num_samples: int,
                 rng: RngStream) -> np.ndarray:
    """Monte-Carlo estimate of each element's probability of being the max.

    region is a list of (mu, var) pairs; returns rho with sum(rho) = 1 exactly.
    """
    if num_samples < 1:
        raise ValueError("need at least one sample")
    mus = np.array([m for m, _ in region])
    sds = np.sqrt(np.array([v for _, v in region]))
    draws = mus + sds * rng.normal((num_samples, len(region)))
    counts = np.bincount(np.argmax(draws, axis=1), minlength=len(region))
    rho = counts / num_samples
    rho[-1] = 1.0 - rho[:-1].sum()  # exact unit sum despite float division
    return rho
