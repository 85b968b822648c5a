"""XNOR/popcount inference on bit-packed +-1 tensors.

+-1 values are packed one bit per element (bit 1 means +1) into 64-bit words,
row-major, LSB-first. Dot products become 2*popcount(XNOR) - n with exact
integer results, and BN followed by sign folds into a per-channel threshold.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .export import DetBN, DeterministicBinaryNet, b_det, _det_pool
from .tensor import ShapeError, _im2col, pool_windows

WORD_BITS = 64


def _tail_mask(n: int, n_words: int) -> np.uint64:
    used = n - WORD_BITS * (n_words - 1)
    if used == WORD_BITS:
        return np.uint64(0xFFFFFFFFFFFFFFFF)
    return np.uint64((1 << used) - 1)


@dataclass
class BitTensor:
    """Bit-packed +-1 tensor; padding bits are zero and masked out of dots."""
    words: np.ndarray           # uint64, shape (..., n_words)
    length: int                 # logical bits per row
    shape: tuple[int, ...]      # logical element shape

    @property
    def n_words(self) -> int:
        return self.words.shape[-1]


def _pack_rows(mat: np.ndarray) -> np.ndarray:
    """(R, K) +-1 matrix -> (R, ceil(K/64)) uint64 words."""
    bits = (mat > 0).astype(np.uint8)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    nbytes = packed.shape[-1]
    pad = (-nbytes) % 8
    if pad:
        packed = np.pad(packed, [(0, 0)] * (packed.ndim - 1) + [(0, pad)])
    return packed.view(np.uint64)


def pack(x: np.ndarray) -> BitTensor:
    """Pack a strictly +-1 array (row-major, LSB-first within each word)."""
    x = np.asarray(x)
    if x.ndim > 3:
        raise ShapeError("pack supports up to 3 dimensions")
    if not np.all(np.abs(x) == 1):
        raise ValueError("pack requires strictly +-1 values")
    flat = x.reshape(1, -1)
    return BitTensor(_pack_rows(flat)[0], x.size, x.shape)


def unpack(b: BitTensor) -> np.ndarray:
    """Inverse of pack: +-1 float array of the original shape."""
    bits = np.unpackbits(b.words.view(np.uint8), bitorder="little",
                         count=b.length)
    return np.where(bits, 1.0, -1.0).reshape(b.shape)


def _popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


def xnor_dot(a: BitTensor, b: BitTensor) -> int:
    """Exact integer dot product sum(a_i * b_i) via XNOR + popcount."""
    if a.length != b.length:
        raise ShapeError(f"length mismatch: {a.length} vs {b.length}")
    x = ~(a.words ^ b.words)
    x[-1] &= _tail_mask(a.length, a.n_words)
    agree = int(_popcount(x).sum())
    return 2 * agree - a.length


def _xnor_matmul(rows: np.ndarray, filters: np.ndarray, n: int,
                 chunk: int = 512) -> np.ndarray:
    """(R, nw) x (O, nw) packed words -> (R, O) integer dot products."""
    r = rows.shape[0]
    mask = _tail_mask(n, rows.shape[-1])
    out = np.empty((r, filters.shape[0]), dtype=np.int64)
    for i in range(0, r, chunk):
        x = ~(rows[i:i + chunk, None, :] ^ filters[None, :, :])
        x[..., -1] &= mask
        out[i:i + chunk] = 2 * _popcount(x).sum(axis=-1, dtype=np.int64) - n
    return out


@dataclass
class ThresholdBN:
    """BN + sign folded to a per-channel threshold comparison.

    For gamma > 0 the post-BN sign is +1 iff a >= t; for gamma < 0 iff
    a <= t (equality maps to +1 either way, matching b_det(0) = +1).
    Channels with gamma == 0 are constant: the sign of beta.
    """
    threshold: np.ndarray   # (C,)
    positive: np.ndarray    # (C,) bool, sign of gamma
    const: np.ndarray       # (C,) bool, gamma == 0
    const_sign: np.ndarray  # (C,) +-1 used where const


def fold_bn(bn: DetBN) -> ThresholdBN:
    """Fold gamma*(a-m)/sqrt(v+eps)+beta >= 0 into a threshold on a."""
    denom = np.sqrt(bn.var + bn.eps)
    const = bn.gamma == 0
    safe_gamma = np.where(const, 1.0, bn.gamma)
    t = bn.mean - bn.beta * denom / safe_gamma
    return ThresholdBN(threshold=t, positive=bn.gamma > 0, const=const,
                       const_sign=np.where(bn.beta >= 0, 1.0, -1.0))


def _threshold_stage(z: np.ndarray, fold: ThresholdBN | None,
                     pool: int | None) -> np.ndarray:
    """Pool pre-activations, then decide signs (matches BN -> pool -> sign)."""
    shape = (1, -1) if z.ndim == 2 else (1, -1, 1, 1)
    if fold is None:
        if pool is not None:
            z = pool_windows(z, pool).max(axis=-1)
        return np.where(z >= 0, 1.0, -1.0)
    pos = fold.positive.reshape(shape)
    if pool is not None:
        win = pool_windows(z, pool)
        # BN is monotone per channel: increasing for gamma>0, decreasing
        # for gamma<0, so pooling BN outputs pools the raw values with
        # max or min accordingly.
        z = np.where(pos[..., None] | fold.const.reshape(shape)[..., None],
                     win.max(axis=-1), win.min(axis=-1))
    t = fold.threshold.reshape(shape)
    fired = np.where(pos, z >= t, z <= t)
    out = np.where(fired, 1.0, -1.0)
    return np.where(fold.const.reshape(shape),
                    fold.const_sign.reshape(shape), out)


def bit_forward(net: DeterministicBinaryNet, x: np.ndarray,
                meta: dict | None = None) -> np.ndarray:
    """XNOR/popcount forward pass, bit-exact with det_forward.

    The first layer (real inputs) and the final softmax layer run in float;
    hidden binary layers use packed words, integer accumulators, and folded
    BN thresholds.
    """
    if not net.bn_reestimated:
        msg = "BN statistics were not re-estimated before bitpacked inference"
        warnings.warn(msg)
        if meta is not None:
            meta.setdefault("warnings", []).append(msg)
    h = np.asarray(x, dtype=np.float64)
    for li, lyr in enumerate(net.layers):
        if li == 0:
            from .export import _linear, _apply_bn
            z = _linear(lyr, h)
            if lyr.bn is not None:
                z = _apply_bn(z, lyr.bn)
            if lyr.pool is not None:
                z = _det_pool(z, lyr.pool)
            h = b_det(z)
            continue
        fold = fold_bn(lyr.bn) if lyr.bn is not None else None
        if lyr.kind == "dense":
            if h.ndim == 4:
                h = h.reshape(h.shape[0], -1)
            n = h.shape[1]
            z = _xnor_matmul(_pack_rows(h), _pack_rows(lyr.weight), n)
            z = z.astype(np.float64)
        else:
            o, _, kh, kw = lyr.weight.shape
            cols, ho, wo = _im2col(h, kh, kw, lyr.stride, lyr.pad)
            nb, p, k = cols.shape
            zi = _xnor_matmul(_pack_rows(cols.reshape(nb * p, k)),
                              _pack_rows(lyr.weight.reshape(o, -1)), k)
            zi = zi.reshape(nb, p, o)
            if lyr.pad > 0:
                # zero-padded patch positions were packed as -1 bits; add
                # back sum(w) over those positions so integers match the
                # float reference exactly
                valid, _, _ = _im2col(np.ones((1,) + h.shape[1:]),
                                      kh, kw, lyr.stride, lyr.pad)
                padmask = 1.0 - valid[0]                    # (P, K)
                zi = zi + (padmask @ lyr.weight.reshape(o, -1).T)[None]
            z = zi.transpose(0, 2, 1).reshape(nb, o, ho, wo)
            z = z.astype(np.float64)
        if lyr.bias is not None:
            z = z + (lyr.bias if z.ndim == 2
                     else lyr.bias.reshape(1, -1, 1, 1))
        h = _threshold_stage(z, fold, lyr.pool)
    if h.ndim == 4:
        h = h.reshape(h.shape[0], -1)
    return h @ net.softmax_w.T + net.softmax_b
