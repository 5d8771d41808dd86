"""Named-parameter checkpoint container.

Layout (all integers u32 little-endian)::

    b"VLTCKPT1"
    meta_len, meta_json (UTF-8)
    record_count
    repeated: name_len, name (UTF-8), rank, extents[rank], float32 LE data

The JSON header carries run metadata (config hash, genome, plan); tensors are
always stored as 32-bit floats so a float32 model round-trips bit-exactly.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"VLTCKPT1"


def dumps(tensors, meta=None) -> bytes:
    meta_b = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        a = np.asarray(arr)
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes):
    """Inverse of :func:`dumps`; returns ``(tensors, meta)``."""
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        pos = 8
        (mlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = json.loads(buf[pos : pos + mlen].decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from e
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last record")
    return out, meta


def save(path, tensors, meta=None):
    with open(path, "wb") as f:
        f.write(dumps(tensors, meta))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
