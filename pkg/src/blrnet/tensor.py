"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float64 by default, float32 for inference paths).
Gradients are recorded on an explicit Tape: while a tape is active, every
differentiable primitive appends a node with the closure needed for its
backward rule. `backward(tape, loss)` replays the tape in reverse and returns
a gradient map for the leaf tensors.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, ndtr

DEFAULT_DTYPE = np.float64

# When True every primitive verifies its output is finite and raises
# NumericError instead of propagating NaN/Inf.
FINITE_CHECKS = True

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Variance floor applied before any division by sigma or CDF evaluation.
VAR_FLOOR = 1e-10


class NumericError(ArithmeticError):
    """A documented op produced NaN/Inf or was called outside its domain."""


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class Tensor:
    """A dense row-major array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise NotImplementedError("only **2 is supported; use square()")

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One recorded primitive application."""

    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...],
                 backward_fn: Callable[[np.ndarray], tuple], op: str):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of primitive applications; usable as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def reset(self):
        self.nodes.clear()


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
            backward_fn) -> Tensor:
    if FINITE_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(out, inputs, backward_fn, op))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _finish("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _finish("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _finish("mul", a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _finish("div", a.data / b.data, (a, b), bwd)


def square(x: Tensor) -> Tensor:
    def bwd(g):
        return (2.0 * g * x.data,)
    return _finish("square", x.data * x.data, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericError("sqrt of negative value")
    y = np.sqrt(x.data)

    def bwd(g):
        return (g * 0.5 / np.maximum(y, 1e-300),)
    return _finish("sqrt", y, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)

    def bwd(g):
        return (g * y,)
    return _finish("exp", y, (x,), bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")

    def bwd(g):
        return (g / x.data,)
    return _finish("log", np.log(x.data), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def bwd(g):
        return (g * y * (1.0 - y),)
    return _finish("sigmoid", y, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - y * y),)
    return _finish("tanh", y, (x,), bwd)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through strictly inside, 0 outside."""
    inside = (x.data > lo) & (x.data < hi)

    def bwd(g):
        return (g * inside,)
    return _finish("clip", np.clip(x.data, lo, hi), (x,), bwd)


def gaussian_cdf_at_zero(mu: Tensor, var: Tensor) -> Tensor:
    """P(X <= 0) for X ~ N(mu, var), elementwise: 0.5*erfc(mu/(sigma*sqrt(2))).

    `var` is clamped to VAR_FLOOR before use; the clamp has zero gradient
    where it is active.
    """
    v = np.maximum(var.data, VAR_FLOOR)
    active = var.data > VAR_FLOOR
    sig = np.sqrt(v)
    u = mu.data / sig
    q = ndtr(-u)

    def bwd(g):
        phi = _INV_SQRT_2PI * np.exp(-0.5 * u * u)
        dmu = -g * phi / sig
        dvar = g * phi * mu.data / (2.0 * sig * v) * active
        return _unbroadcast(dmu, mu.shape), _unbroadcast(dvar, var.shape)
    return _finish("gaussian_cdf_at_zero", q, (mu, var), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axes: int | tuple[int, ...] | None = None,
         keepdims: bool = False) -> Tensor:
    axes_t = _norm_axes(axes, x.ndim)
    y = x.data.sum(axis=axes_t, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if not keepdims and axes_t is not None:
            g = np.expand_dims(g, axes_t)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _finish("sum", np.asarray(y), (x,), bwd)


def tmean(x: Tensor, axes: int | tuple[int, ...] | None = None,
          keepdims: bool = False) -> Tensor:
    axes_t = _norm_axes(axes, x.ndim)
    if axes_t is None:
        n = x.size
    else:
        n = int(np.prod([x.shape[a] for a in axes_t]))
    if n == 0:
        raise ShapeError("mean over an empty axis set")
    y = x.data.mean(axis=axes_t, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if not keepdims and axes_t is not None:
            g = np.expand_dims(g, axes_t)
        return (np.broadcast_to(g / n, x.shape).copy(),)
    return _finish("mean", np.asarray(y), (x,), bwd)


def _norm_axes(axes, ndim):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % ndim for a in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axes {axes}")
    return axes


def channel_mean(x: Tensor) -> Tensor:
    """Mean over batch (and spatial) axes, keeping the channel axis: (C,)."""
    return tmean(x, axes=_non_channel_axes(x))


def channel_var(x: Tensor, ddof: int = 1) -> Tensor:
    """Sample variance over batch (and spatial) axes per channel: (C,)."""
    axes = _non_channel_axes(x)
    n = int(np.prod([x.shape[a] for a in axes]))
    if n - ddof <= 0:
        raise ShapeError(f"need more than {ddof} values per channel, got {n}")
    m = tmean(x, axes=axes, keepdims=True)
    return mul(tsum(square(sub(x, m)), axes=axes), _lift(1.0 / (n - ddof)))


def _non_channel_axes(x: Tensor) -> tuple[int, ...]:
    if x.ndim == 2:   # (N, C)
        return (0,)
    if x.ndim == 4:   # (N, C, H, W)
        return (0, 2, 3)
    raise ShapeError(f"channel reductions expect 2d or 4d input, got {x.ndim}d")


# ---------------------------------------------------------------------------
# linear ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not conform: {a.shape} x {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g
    return _finish("matmul", a.data @ b.data, (a, b), bwd)


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """(N,C,H,W) -> (N, Ho*Wo, C*kh*kw) patch matrix."""
    xp = _pad2d(x, pad)
    n, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, ho, wo, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int,
            pad: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(n, ho, wo, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                d6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2d convolution (cross-correlation): x NCHW, w OIHW."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4d input/kernel, got {x.shape}, {w.shape}")
    n, c, h, wdt = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    if h + 2 * pad < kh or wdt + 2 * pad < kw:
        raise ShapeError("kernel larger than padded input")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape(n, o, ho, wo)

    def bwd(g):
        gm = g.reshape(n, o, ho * wo).transpose(0, 2, 1)  # (N, P, O)
        dw = np.tensordot(gm, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        dcols = gm @ wmat
        dx = _col2im(dcols, x.shape, kh, kw, stride, pad, ho, wo)
        return dx, dw
    return _finish("conv2d", out, (x, w), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2d tensor, got {x.ndim}d")

    def bwd(g):
        return (g.T,)
    return _finish("transpose", x.data.T.copy(), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    def bwd(g):
        return (g.reshape(x.shape),)
    return _finish("reshape", x.data.reshape(shape), (x,), bwd)


def pool_gather(x: Tensor, idx: np.ndarray, window: int) -> Tensor:
    """Select one element per non-overlapping `window`x`window` region.

    idx holds flat in-window indices in [0, window*window), shape
    (N, C, H//window, W//window). Gradients route only to selected elements.
    Trailing rows/cols not covered by a full window are dropped.
    """
    n, c, h, w = x.shape
    k = window
    ho, wo = h // k, w // k
    if idx.shape != (n, c, ho, wo):
        raise ShapeError(f"index map shape {idx.shape} != {(n, c, ho, wo)}")
    xw = x.data[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
    flat = xw.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dxw = dflat.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros_like(x.data)
        dx[:, :, :ho * k, :wo * k] = dxw.reshape(n, c, ho * k, wo * k)
        return (dx,)
    return _finish("pool_gather", out, (x,), bwd)


def pool_windows(x: np.ndarray, window: int) -> np.ndarray:
    """(N,C,H,W) -> (N,C,Ho,Wo,k*k) view of non-overlapping windows (values)."""
    n, c, h, w = x.shape
    k = window
    ho, wo = h // k, w // k
    xw = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
    return xw.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)


# ---------------------------------------------------------------------------
# classification loss
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis (plain arrays)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax_nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    n, k = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"target out of range [0, {k})")
    ls = log_softmax(logits.data)
    nll = -ls[np.arange(n), targets].mean()

    def bwd(g):
        soft = np.exp(ls)
        soft[np.arange(n), targets] -= 1.0
        return (g * soft / n,)
    return _finish("log_softmax_nll", np.asarray(nll), (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(tape: Tape, seed: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-replay `tape` from scalar `seed`; returns grads for leaf tensors."""
    if seed.size != 1:
        raise ValueError("backward seed must be scalar")
    produced = {id(n.out) for n in tape.nodes}
    if id(seed) not in produced:
        raise ValueError("seed was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(seed): np.ones_like(seed.data)}
    tensors: dict[int, Tensor] = {id(seed): seed}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = inp
    return {tensors[k]: g for k, g in grads.items()
            if k not in produced and tensors[k].requires_grad}


def grad_check(fn: Callable[[Sequence[Tensor]], Tensor],
               points: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `fn` maps a list of Tensors to a scalar Tensor and must be recordable.
    Relative error is |analytic - numeric| / max(1, |numeric|).
    """
    params = [Tensor(np.asarray(p, dtype=np.float64), requires_grad=True)
              for p in points]
    with Tape() as tape:
        out = fn(params)
    grads = backward(tape, out)
    worst = 0.0
    for p in params:
        g = grads.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn([Tensor(q.data) for q in params]).item()
            flat[i] = orig - step
            dn = fn([Tensor(q.data) for q in params]).item()
            flat[i] = orig
            num = (up - dn) / (2.0 * step)
            if not math.isfinite(num):
                raise NumericError("non-finite finite-difference value")
            err = abs(gflat[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
