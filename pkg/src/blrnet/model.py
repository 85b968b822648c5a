"""Architecture strings and network assembly.

"32C3-MP2-64C3-MP2-512FC-SM10" parses into conv / pool / fully-connected /
softmax descriptors. The same topology can be built as a stochastic binary
network (training artifact) or as a full-precision network with tanh
activations (pretraining for weight transfer).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (BinaryWeightDistribution, GaussianActivation, binarize,
                     clt_forward, concrete_sample)
from .normpool import (BNParams, PoolGeometry, det_maxpool, stoch_batchnorm,
                       stoch_maxpool)
from .rng import RngStream
from .tensor import Tensor

_TOKEN = re.compile(r"^(?:(\d+)C(\d+)|MP(\d+)|(\d+)FC|SM(\d+))$")


@dataclass
class ModelSpec:
    """Parsed architecture plus build flags."""
    arch: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    binary: bool = True
    batchnorm: bool = True
    use_bias: bool = False
    items: list[tuple] = field(default_factory=list)

    def __post_init__(self):
        if not self.items:
            self.items = parse_arch(self.arch)


def parse_arch(arch: str) -> list[tuple]:
    """Parse an architecture string into (kind, *params) descriptors."""
    items: list[tuple] = []
    tokens = [t for t in arch.strip().split("-") if t]
    if not tokens:
        raise ValueError("empty architecture string")
    for tok in tokens:
        m = _TOKEN.match(tok)
        if not m:
            raise ValueError(f"unparseable architecture token {tok!r}")
        if m.group(1):
            items.append(("conv", int(m.group(1)), int(m.group(2))))
        elif m.group(3):
            if not items or items[-1][0] != "conv":
                raise ValueError("max pooling must directly follow a conv layer")
            items.append(("pool", int(m.group(3))))
        elif m.group(4):
            items.append(("fc", int(m.group(4))))
        else:
            items.append(("softmax", int(m.group(5))))
    if items[-1][0] != "softmax" or sum(1 for it in items if it[0] == "softmax") != 1:
        raise ValueError("architecture must end in exactly one softmax layer")
    return items


def _xavier(rng: RngStream, shape) -> np.ndarray:
    if len(shape) == 2:
        fan_in, fan_out = shape[1], shape[0]
    else:  # OIHW
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform(shape) * 2.0 - 1.0) * bound


@dataclass
class LayerBlock:
    """One hidden layer: linear weights + optional BN + optional pooling."""
    kind: str                      # dense | conv2d
    weight: Tensor                 # logits (binary net) or real weights (FP net)
    bn: BNParams | None
    pool: PoolGeometry | None
    stride: int = 1
    pad: int = 0
    bias: Tensor | None = None


class Network:
    """Shared container for stochastic-binary and full-precision networks."""

    def __init__(self, spec: ModelSpec, blocks: list[LayerBlock],
                 softmax_w: Tensor, softmax_b: Tensor):
        self.spec = spec
        self.blocks = blocks
        self.softmax_w = softmax_w  # (classes, fan_in), real-valued
        self.softmax_b = softmax_b

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, blk in enumerate(self.blocks):
            params[f"layer{i}.weight"] = blk.weight
            if blk.bias is not None:
                params[f"layer{i}.bias"] = blk.bias
            if blk.bn is not None:
                params[f"layer{i}.bn.gamma"] = blk.bn.gamma
                params[f"layer{i}.bn.beta"] = blk.bn.beta
        params["softmax.weight"] = self.softmax_w
        params["softmax.bias"] = self.softmax_b
        return params

    def _flatten_if_needed(self, h: Tensor, blk_kind: str) -> Tensor:
        if blk_kind == "dense" and h.ndim == 4:
            return T.reshape(h, (h.shape[0], -1))
        return h


class StochasticNet(Network):
    """Training-time network over binary weight distributions."""

    def forward(self, x: Tensor, rng: RngStream, tau: float,
                mode: str = "train") -> Tensor:
        h = x
        for blk in self.blocks:
            h = self._flatten_if_needed(h, blk.kind)
            w = BinaryWeightDistribution(blk.weight, blk.kind,
                                         stride=blk.stride, pad=blk.pad)
            ga = clt_forward(h, w, bias=blk.bias)
            if blk.bn is not None:
                ga = stoch_batchnorm(ga, blk.bn, mode=mode)
            if blk.pool is not None:
                ga, _ = stoch_maxpool(ga, blk.pool, rng)
            h = concrete_sample(binarize(ga), tau, rng)
        h = self._flatten_if_needed(h, "dense")
        return T.matmul(h, T.transpose(self.softmax_w)) + self.softmax_b


class FPNet(Network):
    """Full-precision twin: real weights, standard BN, tanh activations."""

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        h = x
        for blk in self.blocks:
            h = self._flatten_if_needed(h, blk.kind)
            if blk.kind == "dense":
                z = T.matmul(h, T.transpose(blk.weight))
                if blk.bias is not None:
                    z = z + blk.bias
            else:
                z = T.conv2d(h, blk.weight, stride=blk.stride, pad=blk.pad)
                if blk.bias is not None:
                    z = z + T.reshape(blk.bias, (1, -1, 1, 1))
            if blk.bn is not None:
                ga = stoch_batchnorm(GaussianActivation(z, Tensor(np.zeros(z.shape))),
                                     blk.bn, mode=mode)
                z = ga.mu
            if blk.pool is not None:
                z = det_maxpool(z, blk.pool)
            h = T.tanh(z)
        h = self._flatten_if_needed(h, "dense")
        return T.matmul(h, T.transpose(self.softmax_w)) + self.softmax_b


def _build(spec: ModelSpec, rng: RngStream, cls) -> Network:
    c, hh, ww = spec.input_shape
    blocks: list[LayerBlock] = []
    items = list(spec.items)
    i = 0
    while i < len(items):
        item = items[i]
        if item[0] == "conv":
            out, k = item[1], item[2]
            pad = k // 2
            pool = None
            if i + 1 < len(items) and items[i + 1][0] == "pool":
                pool = PoolGeometry(items[i + 1][1])
                i += 1
            w = Tensor(_xavier(rng, (out, c, k, k)), requires_grad=True)
            bn = BNParams.create(out) if spec.batchnorm else None
            bias = (Tensor(np.zeros(out), requires_grad=True)
                    if spec.use_bias else None)
            blocks.append(LayerBlock("conv2d", w, bn, pool, pad=pad, bias=bias))
            c = out
            hh = hh + 2 * pad - k + 1
            ww = ww + 2 * pad - k + 1
            if pool is not None:
                hh //= pool.window
                ww //= pool.window
        elif item[0] == "fc":
            width = item[1]
            fan_in = c * hh * ww
            w = Tensor(_xavier(rng, (width, fan_in)), requires_grad=True)
            bn = BNParams.create(width) if spec.batchnorm else None
            bias = (Tensor(np.zeros(width), requires_grad=True)
                    if spec.use_bias else None)
            blocks.append(LayerBlock("dense", w, bn, None, bias=bias))
            c, hh, ww = width, 1, 1
        elif item[0] == "softmax":
            classes = item[1]
            fan_in = c * hh * ww
            sw = Tensor(_xavier(rng, (classes, fan_in)), requires_grad=True)
            sb = Tensor(np.zeros(classes), requires_grad=True)
            return cls(spec, blocks, sw, sb)
        i += 1
    raise ValueError("architecture ended without softmax layer")


def build_stochastic(spec: ModelSpec, rng: RngStream) -> StochasticNet:
    return _build(spec, rng, StochasticNet)  # type: ignore[return-value]


def build_fp(spec: ModelSpec, rng: RngStream) -> FPNet:
    return _build(spec, rng, FPNet)  # type: ignore[return-value]
