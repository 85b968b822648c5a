"""Objectives, Adam with plateau decay, pretraining and weight transfer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelSpec, FPNet, Network, StochasticNet, build_fp, build_stochastic
from .rng import RngStream
from .tensor import Tape, Tensor, backward


@dataclass
class ObjectiveConfig:
    beta_var: float = 1e-6        # variance-regularizer weight
    wd_softmax: float = 1e-4      # weight decay on the final softmax layer
    tau: float = 1.0              # Concrete temperature
    kind: str = "variance-regularized"   # or "variational-bound"

    def __post_init__(self):
        if self.beta_var < 0:
            raise ValueError("beta_var must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.kind not in ("variance-regularized", "variational-bound"):
            raise ValueError(f"unknown objective kind {self.kind!r}")


@dataclass
class OptimizerState:
    """Adam moments per parameter plus the plateau-decay scheduler state."""
    params: dict[str, Tensor]
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    # plateau scheduler
    factor: float = 0.1
    patience: int = 10
    min_delta: float = 1e-4
    lr_floor: float = 1e-5
    best_loss: float = float("inf")
    stall_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def apply(self, grads: dict[Tensor, np.ndarray]):
        """One Adam update from a gradient map; parameter order is fixed."""
        self.step_count += 1
        t = self.step_count
        corr1 = 1.0 - self.beta1 ** t
        corr2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            p.data -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def plateau_schedule(val_loss: float, opt: OptimizerState) -> OptimizerState:
    """Decay lr by `factor` after `patience` epochs without improvement."""
    if val_loss < opt.best_loss - opt.min_delta:
        opt.best_loss = val_loss
        opt.stall_count = 0
    else:
        opt.stall_count += 1
        if opt.stall_count >= opt.patience:
            opt.lr = max(opt.lr * opt.factor, opt.lr_floor)
            opt.stall_count = 0
    return opt


def variance_regularizer(logit_tensors: list[Tensor]) -> Tensor:
    """Sum of p(1-p) over all binary weights, p = sigmoid(W)."""
    total = Tensor(0.0)
    for w in logit_tensors:
        p = T.sigmoid(w)
        total = total + T.tsum(p * (1.0 - p))
    return total


def entropy_term(logit_tensors: list[Tensor]) -> Tensor:
    """Total entropy of the factorized Bernoulli weight distribution."""
    total = Tensor(0.0)
    for w in logit_tensors:
        p = T.clip(T.sigmoid(w), 1e-12, 1.0 - 1e-12)
        total = total - T.tsum(p * T.log(p) + (1.0 - p) * T.log(1.0 - p))
    return total


def training_loss(net: StochasticNet, x: Tensor, y: np.ndarray,
                  cfg: ObjectiveConfig, rng: RngStream,
                  mode: str = "train") -> Tensor:
    logits = net.forward(x, rng, cfg.tau, mode=mode)
    nll = T.log_softmax_nll(logits, y)
    loss = nll + cfg.wd_softmax * T.tsum(T.square(net.softmax_w))
    weight_logits = [b.weight for b in net.blocks]
    if cfg.kind == "variance-regularized":
        if cfg.beta_var > 0:
            loss = loss + cfg.beta_var * variance_regularizer(weight_logits)
    else:
        loss = loss - entropy_term(weight_logits)
    return loss


def train_step(batch: tuple[np.ndarray, np.ndarray], net: StochasticNet,
               cfg: ObjectiveConfig, opt: OptimizerState,
               rng: RngStream) -> float:
    """One stochastic forward pass, backward, and Adam update."""
    x, y = batch
    with Tape() as tape:
        loss = training_loss(net, Tensor(x), y, cfg, rng)
    val = loss.item()
    if not np.isfinite(val):
        raise T.NumericError("non-finite training loss")
    opt.apply(backward(tape, loss))
    return val


def iterate_batches(x: np.ndarray, y: np.ndarray, batch_size: int,
                    rng: RngStream | None = None):
    order = rng.permutation(len(x)) if rng is not None else np.arange(len(x))
    for i in range(0, len(x), batch_size):
        sel = order[i:i + batch_size]
        yield x[sel], y[sel]


def evaluate_stochastic(net: StochasticNet, x: np.ndarray, y: np.ndarray,
                        cfg: ObjectiveConfig, rng: RngStream,
                        batch_size: int = 256) -> tuple[float, float]:
    """(mean NLL, accuracy) of a single stochastic forward pass in eval mode."""
    losses, hits, n = [], 0, 0
    for bx, by in iterate_batches(x, y, batch_size):
        logits = net.forward(Tensor(bx), rng, cfg.tau, mode="eval")
        losses.append(T.log_softmax_nll(logits, by).item() * len(by))
        hits += int((logits.data.argmax(axis=1) == by).sum())
        n += len(by)
    return sum(losses) / n, hits / n


def evaluate_fp(net: FPNet, x: np.ndarray, y: np.ndarray,
                batch_size: int = 256) -> tuple[float, float]:
    losses, hits, n = [], 0, 0
    for bx, by in iterate_batches(x, y, batch_size):
        logits = net.forward(Tensor(bx), mode="eval")
        losses.append(T.log_softmax_nll(logits, by).item() * len(by))
        hits += int((logits.data.argmax(axis=1) == by).sum())
        n += len(by)
    return sum(losses) / n, hits / n


def fp_pretrain(spec: ModelSpec, train: tuple[np.ndarray, np.ndarray],
                epochs: int, seed: int = 0, lr: float = 1e-3,
                batch_size: int = 128,
                val: tuple[np.ndarray, np.ndarray] | None = None,
                verbose: bool = False,
                metrics_out: list[dict] | None = None) -> FPNet:
    """Train a full-precision tanh network of the same topology."""
    rng = RngStream(seed)
    net = build_fp(spec, rng)
    opt = OptimizerState(net.parameters(), lr=lr)
    x, y = train
    for epoch in range(epochs):
        total, count = 0.0, 0
        for bx, by in iterate_batches(x, y, batch_size, rng):
            with Tape() as tape:
                logits = net.forward(Tensor(bx), mode="train")
                loss = T.log_softmax_nll(logits, by)
            if not np.isfinite(loss.item()):
                raise T.NumericError("full-precision pretraining diverged")
            opt.apply(backward(tape, loss))
            total += loss.item() * len(by)
            count += len(by)
        if metrics_out is not None:
            metrics_out.append({"epoch": epoch, "split": "train",
                                "loss": total / count,
                                "accuracy": float("nan")})
        if val is not None:
            vl, va = evaluate_fp(net, *val)
            plateau_schedule(vl, opt)
            if metrics_out is not None:
                metrics_out.append({"epoch": epoch, "split": "val",
                                    "loss": vl, "accuracy": va})
            if verbose:
                print(f"fp epoch {epoch}: val loss {vl:.4f} acc {va:.4f}")
    return net


def transfer_init(fp_weights: np.ndarray, clip_lo: float = 0.05,
                  clip_hi: float = 0.95) -> np.ndarray:
    """Logits whose weight distribution has mean w/std(w), probs clipped.

    Target E[B] = w / std(w over the layer) gives p_minus = (1 - E[B])/2,
    clipped into [clip_lo, clip_hi], then W = logit(p_minus).
    """
    std = fp_weights.std()
    if std == 0:
        raise ValueError("zero-variance layer cannot be transfer-initialized")
    p_minus = np.clip((1.0 - fp_weights / std) / 2.0, clip_lo, clip_hi)
    return np.log(p_minus / (1.0 - p_minus))


def init_from_fp(net: StochasticNet, fp: FPNet):
    """Initialize a stochastic net from a pretrained full-precision twin.

    Binary-layer logits come from transfer_init; BN parameters, running
    statistics, and the real softmax layer are copied as-is.
    """
    if len(net.blocks) != len(fp.blocks):
        raise ValueError("architecture mismatch between networks")
    for blk, fblk in zip(net.blocks, fp.blocks):
        blk.weight.data[...] = transfer_init(fblk.weight.data)
        if blk.bn is not None and fblk.bn is not None:
            blk.bn.gamma.data[...] = fblk.bn.gamma.data
            blk.bn.beta.data[...] = fblk.bn.beta.data
            blk.bn.running_mean[...] = fblk.bn.running_mean
            blk.bn.running_var[...] = fblk.bn.running_var
    net.softmax_w.data[...] = fp.softmax_w.data
    net.softmax_b.data[...] = fp.softmax_b.data


def xavier_init(spec: ModelSpec, seed: int = 0) -> StochasticNet:
    """Stochastic net with logits drawn from the fan-based uniform scheme."""
    return build_stochastic(spec, RngStream(seed))


def run_training(net: StochasticNet, cfg: ObjectiveConfig, opt: OptimizerState,
                 train: tuple[np.ndarray, np.ndarray],
                 val: tuple[np.ndarray, np.ndarray] | None,
                 epochs: int, rng: RngStream, batch_size: int = 128,
                 verbose: bool = False) -> list[dict]:
    """Epoch loop; returns per-epoch metric records."""
    metrics = []
    x, y = train
    for epoch in range(epochs):
        total, count = 0.0, 0
        for bx, by in iterate_batches(x, y, batch_size, rng):
            total += train_step((bx, by), net, cfg, opt, rng) * len(by)
            count += len(by)
        metrics.append({"epoch": epoch, "split": "train",
                        "loss": total / count, "accuracy": float("nan")})
        if val is not None:
            vl, va = evaluate_stochastic(net, *val, cfg, rng)
            plateau_schedule(vl, opt)
            metrics.append({"epoch": epoch, "split": "val",
                            "loss": vl, "accuracy": va})
            if verbose:
                print(f"epoch {epoch}: train {total / count:.4f} "
                      f"val {vl:.4f} acc {va:.4f} lr {opt.lr:g}")
    return metrics
