"""Parameter checkpoints: JSON manifest followed by raw little-endian float64 data.

Layout::

    b"PNXTCKPT" | uint64 LE manifest length | manifest (UTF-8 JSON) | data

The manifest lists ``{"name", "shape"}`` for every array (trainable
parameters and norm running statistics) in traversal order; the data block
holds their values in that same order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ManifestMismatch
from .network import iter_arrays

MAGIC = b"PNXTCKPT"
FORMAT = "pillarnext-checkpoint/1"


def checkpoint_bytes(params, extra: dict | None = None) -> bytes:
    arrays = [(name, arr) for name, arr, _ in iter_arrays(params)]
    manifest = {"format": FORMAT,
                "params": [{"name": n, "shape": list(a.shape)} for n, a in arrays]}
    if extra:
        manifest["meta"] = extra
    head = json.dumps(manifest, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def save_checkpoint(params, path, extra: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params, extra))
    os.replace(tmp, path)


def read_manifest(data: bytes) -> tuple[dict, int]:
    if data[:8] != MAGIC or len(data) < 16:
        raise ManifestMismatch("not a checkpoint file (bad magic)")
    (length,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16:16 + length])
    except ValueError as exc:
        raise ManifestMismatch(f"unreadable manifest: {exc}") from None
    return manifest, 16 + length


def load_checkpoint(params, path) -> dict:
    """Copy checkpoint values into ``params`` in place; returns the manifest."""
    data = Path(path).read_bytes()
    manifest, offset = read_manifest(data)
    arrays = [(name, arr) for name, arr, _ in iter_arrays(params)]
    listed = [(p["name"], tuple(p["shape"])) for p in manifest.get("params", [])]
    expected = [(n, a.shape) for n, a in arrays]
    if listed != expected:
        missing = sorted(set(expected) ^ set(listed))[:3]
        raise ManifestMismatch(f"checkpoint does not match the configured network, e.g. {missing}")
    total = sum(int(np.prod(s)) for _, s in expected)
    if len(data) - offset != 8 * total:
        raise ManifestMismatch(f"expected {8 * total} data bytes, found {len(data) - offset}")
    flat = np.frombuffer(data, dtype="<f8", count=total, offset=offset)
    pos = 0
    for _, arr in arrays:
        arr[...] = flat[pos:pos + arr.size].reshape(arr.shape)
        pos += arr.size
    return manifest
