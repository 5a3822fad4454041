"""Single-file checkpoint container.

Layout: 8-byte magic ``NMAPCKPT``, 4-byte little-endian manifest length, UTF-8
JSON manifest, then raw little-endian arrays in manifest order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Parameter

MAGIC = b"NMAPCKPT"


class CheckpointError(ValueError):
    pass


def _entries(arrays: dict[str, np.ndarray], offset: int) -> tuple[list, list, int]:
    entries, blobs = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    return entries, blobs, offset


def save_checkpoint(path, params: Sequence[Parameter], optimizer_state: dict | None = None,
                    seed: int | None = None, extra: dict | None = None) -> None:
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    p_entries, p_blobs, offset = _entries({p.name: p.data for p in params}, 0)
    o_entries, o_blobs, _ = _entries(optimizer_state or {}, offset)
    manifest = {"params": p_entries, "optimizer": o_entries, "seed": seed, "extra": extra or {}}
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in p_blobs + o_blobs:
            f.write(blob)


def read_checkpoint(path) -> tuple[dict, dict, dict]:
    """Return ``(manifest, param_arrays, optimizer_arrays)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (n,) = struct.unpack("<I", raw[8:12])
    manifest = json.loads(raw[12:12 + n].decode("utf-8"))
    base = 12 + n

    def load(entries):
        out = {}
        for e in entries:
            dt = np.dtype(e["dtype"])
            count = int(np.prod(e["shape"], dtype=np.int64))
            start = base + e["offset"]
            arr = np.frombuffer(raw, dtype=dt, count=count, offset=start)
            out[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
        return out

    return manifest, load(manifest["params"]), load(manifest["optimizer"])


def load_into(params: Sequence[Parameter], arrays: dict[str, np.ndarray]) -> None:
    """Copy arrays into parameters; reject on any missing name or shape mismatch."""
    problems = []
    for p in params:
        if p.name not in arrays:
            problems.append(f"{p.name}: missing")
        elif tuple(arrays[p.name].shape) != p.shape:
            problems.append(f"{p.name}: checkpoint {tuple(arrays[p.name].shape)} vs model {p.shape}")
    extra = set(arrays) - {p.name for p in params}
    problems += [f"{name}: not in model" for name in sorted(extra)]
    if problems:
        raise CheckpointError("checkpoint does not match model:\n  " + "\n  ".join(problems))
    for p in params:
        p.data[...] = arrays[p.name]
