"""Checkpoint container: JSON header followed by little-endian float32 arrays.

Layout::

    b"MRXCKPT1"                 8-byte magic
    uint64 LE                   header length in bytes
    header                      UTF-8 JSON object
    float32 LE arrays           concatenated in ``header["tensors"]`` order

``header["tensors"]`` is a list of ``{"name": str, "shape": [int, ...]}``.
Any further header keys (version, model config, training state) are opaque
to this module.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MRXCKPT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: list[tuple[str, np.ndarray]], header: dict | None = None) -> None:
    header = dict(header or {})
    header["version"] = VERSION
    header["tensors"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    pos = 16 + n
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = raw[pos : pos + 4 * count]
        if len(chunk) != 4 * count:
            raise CheckpointError(f"{path}: truncated data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        pos += 4 * count
    return header, arrays
