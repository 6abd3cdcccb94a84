"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"FPK1"
    repeated until EOF:
        uint32  name length, then that many UTF-8 bytes
        uint32  rank, then ``rank`` x uint64 extents
        prod(extents) x float64 (little-endian), row-major
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import CheckpointError

MAGIC = b"FPK1"


def dumps(named_arrays):
    parts = [MAGIC]
    for name, arr in named_arrays:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(data):
    """Return a list of ``(name, ndarray)`` in file order."""
    if data[:4] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    out = []
    pos = 4
    n = len(data)

    def take(k):
        nonlocal pos
        if pos + k > n:
            raise CheckpointError(f"truncated checkpoint at offset {pos}")
        chunk = data[pos : pos + k]
        pos += k
        return chunk

    while pos < n:
        (ln,) = struct.unpack("<I", take(4))
        try:
            name = take(ln).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"bad parameter name at offset {pos - ln}") from exc
        (rank,) = struct.unpack("<I", take(4))
        if rank > 16:
            raise CheckpointError(f"implausible rank {rank} for {name!r}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        out.append((name, arr))
    return out


def save(module, path):
    payload = dumps((name, p.data) for name, p in module.named_parameters())
    with open(path, "wb") as fh:
        fh.write(payload)
    return payload


def load_into(module, path_or_bytes):
    data = path_or_bytes
    if not isinstance(data, (bytes, bytearray)):
        with open(path_or_bytes, "rb") as fh:
            data = fh.read()
    stored = dict(loads(bytes(data)))
    params = dict(module.named_parameters())
    missing = set(params) - set(stored)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        arr = stored[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data = arr.copy()
    return module
