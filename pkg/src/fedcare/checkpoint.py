"""Versioned binary checkpoints for classifiers and generators.

Layout (little-endian)::

    b"FCKP" | u32 version | u8 kind | 32-byte sha256 of the architecture JSON
    | u64 JSON length | JSON | u64 value count | float64 values | 32-byte sha256 trailer

``values`` holds the flat parameters followed by any batch-norm running
statistics in layer order.  The trailer hashes everything before it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .generator import GeneratorNet
from .numerics import LayerSpec, Network, ParamVector, SplitModel

MAGIC = b"FCKP"
VERSION = 1
KINDS = {0: "classifier", 1: "generator"}
_HEAD = struct.Struct("<4sIB32sQ")


def _arch_blob(arch: dict) -> bytes:
    return json.dumps(arch, sort_keys=True).encode()


def _buffer_values(net: Network):
    parts = []
    for idx in sorted(net.buffers):
        rm, rv = net.buffers[idx]
        parts += [np.asarray(rm, dtype=np.float64).ravel(), np.asarray(rv, dtype=np.float64).ravel()]
    return parts


def encode(net: Network, extra: dict | None = None) -> bytes:
    if isinstance(net, GeneratorNet):
        kind, meta, net = 1, net.meta(), net.net
    else:
        kind, meta = 0, {}
    arch = net.architecture()
    arch["buffer_layers"] = sorted(int(i) for i in net.buffers)
    arch["meta"] = dict(meta, **(extra or {}))
    blob = _arch_blob(arch)
    values = np.concatenate([net.params.values] + _buffer_values(net)).astype("<f8")
    body = (_HEAD.pack(MAGIC, VERSION, kind, hashlib.sha256(blob).digest(), len(blob)) + blob
            + struct.pack("<Q", values.size) + values.tobytes())
    return body + hashlib.sha256(body).digest()


def decode(raw: bytes, source="<bytes>"):
    """Inverse of :func:`encode`; returns a ``SplitModel``, ``Network`` or ``GeneratorNet``."""
    if len(raw) < _HEAD.size + 8 + 32:
        raise CheckpointError(f"{source}: file too short to be a checkpoint")
    magic, version, kind, digest, n_json = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{source}: format version {version}, this build reads {VERSION}")
    body, trailer = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError(f"{source}: checksum mismatch (corrupt or truncated)")
    if kind not in KINDS:
        raise CheckpointError(f"{source}: unknown payload kind {kind}")
    pos = _HEAD.size
    blob = body[pos:pos + n_json]
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointError(f"{source}: architecture digest mismatch")
    arch = json.loads(blob)
    pos += n_json
    (count,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    values = np.frombuffer(body, dtype="<f8", count=count, offset=pos).astype(np.float64)
    if pos + 8 * count != len(body):
        raise CheckpointError(f"{source}: payload length does not match its header")

    specs = [LayerSpec.from_dict(d) for d in arch["layers"]]
    shell = Network.build(specs, arch["input_shape"])
    n = len(shell.params)
    params = ParamVector(values[:n], shell.layout)
    buffers, off = {}, n
    for idx in arch["buffer_layers"]:
        width = len(shell.buffers[idx][0])
        buffers[idx] = (values[off:off + width].copy(), values[off + width:off + 2 * width].copy())
        off += 2 * width
    if off != count:
        raise CheckpointError(f"{source}: {count} stored values, architecture needs {off}")
    meta = arch.get("meta", {})
    if KINDS[kind] == "generator":
        net = Network(specs, arch["input_shape"], params, buffers)
        return GeneratorNet(net, int(meta["latent_dim"]), int(meta["class_count"]), meta["out_activation"])
    if "split_index" in arch:
        return SplitModel(specs, arch["input_shape"], params, arch["split_index"], buffers)
    return Network(specs, arch["input_shape"], params, buffers)


def save(path, net, extra=None):
    Path(path).write_bytes(encode(net, extra))


def load(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    return decode(raw, str(path))
