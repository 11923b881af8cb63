"""Binary checkpoint format.

Layout::

    u64 little-endian   header length in bytes
    header              UTF-8 JSON {schema_version, config, state, tensors: [{name, dtype, shape, byte_offset}]}
    body                little-endian f32 blobs, concatenated in header order

Offsets are relative to the start of the body and contiguous. JSON is written
with sorted keys and no whitespace so equal checkpoints are equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import MixerConfig, MixerParams

SCHEMA_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: MixerConfig
    params: MixerParams
    state: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name, arr in ckpt.params.items():
        blob = np.ascontiguousarray(arr, dtype=_DTYPES["f32"]).tobytes()
        tensors.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "byte_offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {"schema_version": SCHEMA_VERSION, "config": ckpt.config.to_dict(),
              "state": ckpt.state, "tensors": tensors}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(blobs)


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 8:
        raise CheckpointError("file too short for the header length prefix")
    (n,) = struct.unpack("<Q", raw[:8])
    if 8 + n > len(raw):
        raise CheckpointError(f"header length {n} exceeds file size {len(raw)}")
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported schema_version {header.get('schema_version')!r}")
    body = raw[8 + n:]
    params, expected = {}, 0
    for t in header["tensors"]:
        dt = _DTYPES[t["dtype"]]
        count = int(np.prod(t["shape"], dtype=np.int64))
        if t["byte_offset"] != expected:
            raise CheckpointError(f"tensor {t['name']} offset {t['byte_offset']} is not contiguous (expected {expected})")
        end = expected + count * dt.itemsize
        if end > len(body):
            raise CheckpointError(f"tensor {t['name']} runs past the end of the body")
        params[t["name"]] = np.frombuffer(body, dtype=dt, count=count, offset=expected).reshape(t["shape"]).astype(np.float32)
        expected = end
    if expected != len(body):
        raise CheckpointError(f"{len(body) - expected} trailing bytes after the last tensor")
    return Checkpoint(MixerConfig.from_dict(header["config"]), params, header.get("state", {}))


def save(ckpt: Checkpoint, path: str) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(ckpt))


def load(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return from_bytes(f.read())
