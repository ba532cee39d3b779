"""Versioned, checksummed checkpoint container.

Layout (little endian)::

    magic  b"CAEPLCK\\0"        8 bytes
    version uint32             4 bytes
    header_len uint64          8 bytes
    sha256(header + payload)  32 bytes
    header  JSON (utf-8)       header_len bytes
    payload raw array bytes    rest of file

The header carries the model spec, metadata and an index of
``name -> (dtype, shape, offset)`` into the payload, which holds every
parameter and BN statistic under its ``layer.param`` name.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError, MissingCheckpointError, VersionError

MAGIC = b"CAEPLCK\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ32s")


@dataclass
class Checkpoint:
    arrays: dict
    model_spec: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model, metadata=None):
        return cls(model.state_dict(), model.to_spec(), dict(metadata or {}))

    def build_model(self):
        from .layers import ModelGraph

        model = ModelGraph.from_spec(self.model_spec)
        dtype = next(iter(self.arrays.values())).dtype if self.arrays else np.float32
        model.materialize(dtype)
        model.load_state_dict(self.arrays)
        return model


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def encode(ckpt):
    index, chunks, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name])
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({"model_spec": ckpt.model_spec, "metadata": ckpt.metadata, "arrays": index},
                        sort_keys=True, default=_json_default).encode()
    digest = hashlib.sha256(header + payload).digest()
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header), digest) + header + payload


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def decode(data):
    if len(data) < _PREFIX.size:
        raise IntegrityError("checkpoint truncated: incomplete header")
    magic, version, hlen, digest = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    body = data[_PREFIX.size:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch (file truncated or modified)")
    header = json.loads(body[:hlen].decode())
    payload = body[hlen:]
    arrays = {}
    for item in header["arrays"]:
        raw = payload[item["offset"] : item["offset"] + item["nbytes"]]
        if len(raw) != item["nbytes"]:
            raise IntegrityError(f"checkpoint truncated inside array {item['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(item["dtype"])).reshape(item["shape"])
        arrays[item["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return Checkpoint(arrays, header["model_spec"], header["metadata"], version)


def save_checkpoint(model_or_ckpt, path, metadata=None):
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else Checkpoint.from_model(model_or_ckpt, metadata)
    if metadata and ckpt is model_or_ckpt:
        ckpt = Checkpoint(ckpt.arrays, ckpt.model_spec, {**ckpt.metadata, **metadata})
    atomic_write_bytes(path, encode(ckpt))
    return ckpt


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
