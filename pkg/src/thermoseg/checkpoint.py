"""Flat binary container for named float32 arrays (weights, edge maps).

Layout, all integers little-endian u32:
    magic "ECCN" | version | entry count
    per entry: name length | UTF-8 name | ndim | dims... | float32 data (LE)
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"ECCN"
VERSION = 1


def save_arrays(arrays: "OrderedDict[str, np.ndarray] | dict", path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            data = np.asarray(arr, dtype="<f4")  # tobytes() below emits C order
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def load_arrays(path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    offset = 12
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}I", raw, offset) if ndim else ()
        offset += 4 * ndim
        n_values = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n_values, offset=offset).reshape(dims)
        offset += 4 * n_values
        out[name] = arr.copy()
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after last entry")
    return out
