"""Checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"LOOPCKPT"
    1 byte    format version (currently 1)
    8 bytes   header length H (uint64)
    H bytes   UTF-8 JSON header, keys sorted, no whitespace:
              {"arrays": [{"name", "shape", "offset", "nbytes"}, ...],
               "config": {...}, "meta": {...}}
    ...       array payloads, float64 little-endian, C order, back to back;
              ``offset`` counts from the first payload byte

Arrays keep the order they were given in, so save -> load -> save writes
identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LOOPCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, payload, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        payload.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"arrays": entries, "config": ckpt.config, "meta": ckpt.meta}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return MAGIC + bytes([VERSION]) + struct.pack("<Q", len(header)) + header + b"".join(payload)


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 17 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if blob[8] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[8]}")
    (hlen,) = struct.unpack("<Q", blob[9:17])
    try:
        header = json.loads(blob[17 : 17 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header ({exc})") from None
    base = 17 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        raw = blob[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return Checkpoint(arrays, header["config"], header["meta"])


def save(path, ckpt: Checkpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
