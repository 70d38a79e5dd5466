"""Versioned binary checkpoint files.

Layout: 8-byte magic, u32 version, u32 header length, JSON header (model
kind, dimensions, segment order), then the flat parameter buffer as
little-endian float64 in declared segment order.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .numerics import ParamVector

MAGIC = b"RIFFCKPT"
VERSION = 1


def save_segments(path, header: dict, pv: ParamVector) -> None:
    meta = dict(header)
    meta["segments"] = [[name, list(shape)] for name, shape in pv.segments()]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(pv.values.astype("<f8").tobytes())


def load_segments(path) -> tuple[dict, ParamVector]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        raw = f.read()
    segments = [(name, tuple(shape)) for name, shape in header["segments"]]
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    pv = ParamVector(segments, values)
    return header, pv


def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def params_hash(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values).tobytes()).hexdigest()[:16]
