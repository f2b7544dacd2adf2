"""Versioned binary checkpoint container.

Layout (little-endian):

    magic   8 bytes   b"DLABCKP1"
    hlen    u32       length of the JSON header
    header  hlen      {"version": 1, "config": {...}, "seed": int,
                       "tensors": [{"name": str, "shape": [int, ...]}, ...]}
    blobs   ...       raw float64 LE values, in header order
    digest  32 bytes  sha256 of everything before it
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .model import ModelConfig, config_from_dict, config_to_dict
from .tensor import Tensor

MAGIC = b"DLABCKP1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, config: ModelConfig):
    names = sorted(params)
    header = {
        "version": VERSION,
        "config": config_to_dict(config),
        "seed": config.seed,
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", len(hbytes))
    buf += hbytes
    for n in names:
        buf += np.ascontiguousarray(params[n].data, dtype="<f8").tobytes()
    buf += hashlib.sha256(bytes(buf)).digest()
    with open(path, "wb") as f:
        f.write(bytes(buf))


def load_checkpoint(path):
    """Returns (params, config); raises CheckpointError on corruption."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 4 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    hlen = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])[0]
    hstart = len(MAGIC) + 4
    header = json.loads(raw[hstart: hstart + hlen].decode())
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    config = config_from_dict(header["config"])
    params = {}
    off = hstart + hlen
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        vals = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        params[spec["name"]] = Tensor(vals.copy(), requires_grad=True)
        off += count * 8
    if off != len(body):
        raise CheckpointError(f"{path}: trailing or missing tensor data")
    return params, config
