"""Serialization helpers: JSON-lines, CSV grids and framed float32 blobs.

The blob format used for checkpoints and buffers is a single file:
8-byte little-endian header length, UTF-8 JSON header, then the named
arrays concatenated as little-endian float32 in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_grid_csv(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    fmt = "%d" if np.issubdtype(array.dtype, np.integer) else "%.17g"
    np.savetxt(path, array, fmt=fmt, delimiter=",")


def read_grid_csv(path, dtype=float) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=dtype, ndmin=2)


def save_blob(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a framed checkpoint: JSON header + float32 parameter blob."""
    names = list(arrays.keys())
    full_header = dict(header)
    full_header["arrays"] = [
        {"name": n, "shape": list(np.asarray(arrays[n]).shape)} for n in names
    ]
    head_bytes = json.dumps(full_header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head_bytes)))
        fh.write(head_bytes)
        for n in names:
            fh.write(np.asarray(arrays[n], dtype="<f4").tobytes())


def load_blob(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a framed checkpoint; arrays come back as float64."""
    with open(path, "rb") as fh:
        (head_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(head_len).decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            arrays[spec["name"]] = (
                np.frombuffer(buf, dtype="<f4", count=count).astype(np.float64).reshape(shape)
            )
    return header, arrays


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
