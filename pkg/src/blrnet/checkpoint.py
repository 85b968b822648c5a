"""Checkpoint serialization: "BLRN" magic, JSON header, raw tensor blocks.

Layout: 4 magic bytes, uint32 version, uint32 header length, UTF-8 JSON
header, concatenated little-endian tensor blocks, uint32 CRC-32 of all
preceding bytes. The header records the model class, architecture string,
seed, free-form metadata, and per-tensor name/dtype/shape/byte-offset
entries. Binary +-1 weights of deterministic nets are stored bit-packed.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .export import DetBN, DetLayer, DeterministicBinaryNet
from .model import FPNet, ModelSpec, Network, StochasticNet, build_fp, build_stochastic
from .rng import RngStream

MAGIC = b"BLRN"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def _collect_network(net: Network) -> dict[str, np.ndarray]:
    tensors = {name: p.data for name, p in net.parameters().items()}
    for i, blk in enumerate(net.blocks):
        if blk.bn is not None:
            tensors[f"layer{i}.bn.running_mean"] = blk.bn.running_mean
            tensors[f"layer{i}.bn.running_var"] = blk.bn.running_var
    return tensors


def _collect_det(net: DeterministicBinaryNet) -> tuple[dict, dict[str, np.ndarray]]:
    tensors: dict[str, np.ndarray] = {}
    layer_meta = []
    for i, lyr in enumerate(net.layers):
        bits = np.packbits((lyr.weight.reshape(-1) > 0).astype(np.uint8),
                           bitorder="little")
        tensors[f"layer{i}.weight_bits"] = bits
        meta = {"kind": lyr.kind, "weight_shape": list(lyr.weight.shape),
                "pool": lyr.pool, "stride": lyr.stride, "pad": lyr.pad,
                "has_bn": lyr.bn is not None, "has_bias": lyr.bias is not None}
        if lyr.bn is not None:
            meta["bn_eps"] = lyr.bn.eps
            for part in ("gamma", "beta", "mean", "var"):
                tensors[f"layer{i}.bn.{part}"] = getattr(lyr.bn, part)
        if lyr.bias is not None:
            tensors[f"layer{i}.bias"] = lyr.bias
        layer_meta.append(meta)
    tensors["softmax.weight"] = net.softmax_w
    tensors["softmax.bias"] = net.softmax_b
    header = {"layers": layer_meta, "bn_reestimated": net.bn_reestimated}
    return header, tensors


def save_checkpoint(model, path, seed: int = 0, metadata: dict | None = None):
    """Write `model` (StochasticNet, FPNet, or DeterministicBinaryNet)."""
    if isinstance(model, DeterministicBinaryNet):
        kind = "deterministic"
        extra, tensors = _collect_det(model)
        spec_info = {"arch": model.arch, "input_shape": list(model.input_shape)}
    elif isinstance(model, (StochasticNet, FPNet)):
        kind = "stochastic" if isinstance(model, StochasticNet) else "fp"
        extra, tensors = {}, _collect_network(model)
        s = model.spec
        spec_info = {"arch": s.arch, "input_shape": list(s.input_shape),
                     "binary": s.binary, "batchnorm": s.batchnorm,
                     "use_bias": s.use_bias}
    else:
        raise CheckpointError(f"cannot serialize {type(model).__name__}")

    specs, blob = [], bytearray()
    for name in sorted(tensors):
        a = _le(np.asarray(tensors[name]))
        specs.append({"name": name, "dtype": a.dtype.str,
                      "shape": list(a.shape), "offset": len(blob)})
        blob += a.tobytes()
    header = {"kind": kind, "spec": spec_info, "seed": seed,
              "metadata": metadata or {}, "tensors": specs, **extra}
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + bytes(blob)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def _read_tensors(header: dict, blob: bytes) -> dict[str, np.ndarray]:
    out = {}
    for t in header["tensors"]:
        a = np.frombuffer(blob, dtype=np.dtype(t["dtype"]), offset=t["offset"],
                          count=int(np.prod(t["shape"], dtype=np.int64)))
        out[t["name"]] = a.reshape(t["shape"]).astype(a.dtype.newbyteorder("="))
    return out


def _restore_det(header: dict, tensors: dict) -> DeterministicBinaryNet:
    layers = []
    for i, meta in enumerate(header["layers"]):
        shape = tuple(meta["weight_shape"])
        n = int(np.prod(shape))
        bits = np.unpackbits(tensors[f"layer{i}.weight_bits"],
                             bitorder="little", count=n)
        weight = np.where(bits.astype(bool), 1.0, -1.0).reshape(shape)
        bn = None
        if meta["has_bn"]:
            bn = DetBN(*(tensors[f"layer{i}.bn.{p}"].astype(np.float64)
                         for p in ("gamma", "beta", "mean", "var")),
                       eps=meta["bn_eps"])
        bias = tensors.get(f"layer{i}.bias") if meta["has_bias"] else None
        layers.append(DetLayer(meta["kind"], weight, bn, meta["pool"],
                               stride=meta["stride"], pad=meta["pad"],
                               bias=bias))
    spec = header["spec"]
    return DeterministicBinaryNet(
        spec["arch"], tuple(spec["input_shape"]), layers,
        tensors["softmax.weight"], tensors["softmax.bias"],
        bn_reestimated=header["bn_reestimated"])


def _restore_network(header: dict, tensors: dict) -> Network:
    s = header["spec"]
    spec = ModelSpec(s["arch"], tuple(s["input_shape"]), binary=s["binary"],
                     batchnorm=s["batchnorm"], use_bias=s["use_bias"])
    build = build_stochastic if header["kind"] == "stochastic" else build_fp
    net = build(spec, RngStream(0))
    params = net.parameters()
    for name, p in params.items():
        p.data[...] = tensors[name]
    for i, blk in enumerate(net.blocks):
        if blk.bn is not None:
            blk.bn.running_mean[...] = tensors[f"layer{i}.bn.running_mean"]
            blk.bn.running_var[...] = tensors[f"layer{i}.bn.running_var"]
    return net


def load_checkpoint(path):
    """Read a checkpoint; returns (model, header dict)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header at offset {len(raw)}")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(raw) < 12 + hlen + 4:
        raise CheckpointError(f"{path}: file ends at offset {len(raw)}, "
                              f"header needs {12 + hlen + 4}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch at offset {len(body)}")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except ValueError as e:
        raise CheckpointError(f"{path}: invalid header: {e}") from None
    tensors = _read_tensors(header, body[12 + hlen:])
    if header["kind"] == "deterministic":
        model = _restore_det(header, tensors)
    elif header["kind"] in ("stochastic", "fp"):
        model = _restore_network(header, tensors)
    else:
        raise CheckpointError(f"{path}: unknown model kind {header['kind']!r}")
    return model, header
