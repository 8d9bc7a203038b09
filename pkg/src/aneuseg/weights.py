"""Weights archive: named float32 tensors plus a JSON metadata block.

Layout (all integers little-endian)::

    b"ANWT"                     magic
    uint32  version             currently 1
    uint32  meta_len            followed by meta_len bytes of UTF-8 JSON
    uint32  n_tensors
    n_tensors times:
        uint16  name_len        followed by the UTF-8 name
        uint8   ndim            followed by ndim uint32 extents
        float32[prod(extents)]  row-major (C order), IEEE-754 little-endian
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"ANWT"
VERSION = 1


class WeightsError(ValueError):
    pass


def save_weights(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_weights(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise WeightsError(f"{path}: not a weights archive")
    try:
        version, meta_len = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise WeightsError(f"{path}: unsupported archive version {version}")
        pos = 12
        meta = json.loads(raw[pos : pos + meta_len].decode())
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode()
            pos += name_len
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(raw):
                raise WeightsError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
    except struct.error as exc:
        raise WeightsError(f"{path}: truncated archive") from exc
    return tensors, meta


def state_to_arrays(state: Mapping) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in state.items()}
