"""Binary checkpoint format.

Layout (little-endian)::

    b"GATN"                      magic
    u32 version                  currently 1
    u32 n, n bytes               canonical JSON header (config + metadata)
    u32 count                    number of tensor records
    count x record:
        u32 n, n bytes           tensor name (utf-8)
        u32 rank
        rank x u64               extents
        prod(extents) x f32      values
    u32 n, n bytes               RNG state blob (JSON)
"""

import json
import os
import struct

import numpy as np

MAGIC = b"GATN"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint."""


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(header, tensors, rng_state):
    """Serialize ``header`` (dict), named arrays and an RNG state (dict)."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = _canonical(header)
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts += [struct.pack("<Q", n) for n in arr.shape]
        parts.append(arr.tobytes())
    blob = _canonical(rng_state)
    parts += [struct.pack("<I", len(blob)), blob]
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def decode(data):
    """Inverse of :func:`encode`: returns ``(header, [(name, array)], rng_state)``."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a GATN checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted header ({exc})") from None
    tensors = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        if rank > 8:
            raise CheckpointError(f"tensor {name!r}: implausible rank {rank}")
        shape = tuple(r.u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        tensors.append((name, arr.astype(np.float32)))
    try:
        rng_state = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted RNG state ({exc})") from None
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after RNG state")
    return header, tensors, rng_state


def write(path, header, tensors, rng_state):
    data = encode(header, tensors, rng_state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
