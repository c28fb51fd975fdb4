"""Binary checkpoint format.

Layout (little-endian)::

    b"NSMAECKP"  u32 version  u32 entry_count
    entry_count x { u32 path_len, path (UTF-8), u32 rank, rank x u64 extent, f64 payload }
    u64 meta_len, JSON metadata (UTF-8)
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

MAGIC = b"NSMAECKP"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, path: str | None = None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path


def save_checkpoint(file, tensors: Mapping[str, np.ndarray], metadata: dict | None = None) -> None:
    """Write named f64 tensors plus a JSON metadata block."""
    with open(file, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for path, value in tensors.items():
            arr = np.asarray(value, dtype="<f8")
            name = path.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())
        meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<Q", len(meta)))
        f.write(meta)


def _read(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def load_checkpoint(file) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (tensors, metadata)."""
    try:
        f = open(file, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint: {exc.strerror}", str(file)) from None
    with f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError("bad magic (not an NSMAE checkpoint)", str(file))
        version, count = struct.unpack("<II", _read(f, 8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}", str(file))
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read(f, 4))
            path = _read(f, n).decode("utf-8")
            (rank,) = struct.unpack("<I", _read(f, 4))
            shape = struct.unpack(f"<{rank}Q", _read(f, 8 * rank))
            size = int(np.prod(shape, dtype=np.int64))
            tensors[path] = np.frombuffer(_read(f, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        (meta_len,) = struct.unpack("<Q", _read(f, 8))
        metadata = json.loads(_read(f, meta_len).decode("utf-8"))
    return tensors, metadata


def assign(params: Mapping, tensors: Mapping[str, np.ndarray], prefix: str = "", strict: bool = True) -> list[str]:
    """Copy checkpoint tensors into parameters whose path starts with ``prefix``.

    ``params`` maps paths to objects with a ``.data`` array. Every selected
    parameter must be present with the same shape; with ``strict`` the
    checkpoint may not hold extra paths under the prefix either. Returns the
    assigned paths.
    """
    wanted = [p for p in params if p.startswith(prefix)]
    for path in wanted:
        if path not in tensors:
            raise CheckpointError("missing from checkpoint", path)
        if tensors[path].shape != params[path].data.shape:
            raise CheckpointError(f"shape {tensors[path].shape} does not match parameter {params[path].data.shape}", path)
    if strict:
        extra = sorted(p for p in tensors if p.startswith(prefix) and p not in params)
        if extra:
            raise CheckpointError("not a parameter of this architecture", extra[0])
    for path in wanted:
        params[path].data[...] = tensors[path]
    return wanted
