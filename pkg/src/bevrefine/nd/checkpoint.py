"""Binary checkpoint files for a ParamStore.

Layout (all integers little-endian):
  magic "BEVR1"
  u32 parameter count
  per parameter:
    u32 name length, UTF-8 name
    u32 rank, u32 extents (rank of them)
    f32 elements, row-major
    f32 first-moment elements, f32 second-moment elements (same layout)
  u64 optimizer step counter
  u32 extra-blob length, raw bytes (effective run config, may be empty)

Elements are always stored as f32; a store using f64 is truncated on save.
"""
from __future__ import annotations

import struct

import numpy as np

from .optim import ParamStore

MAGIC = b"BEVR1"


class CheckpointError(ValueError):
    """Malformed checkpoint file; message carries the failing byte offset."""


def save(store: ParamStore, path, extra: bytes = b"") -> None:
    names = store.names()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            t = store[name]
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            m, v = store.moments(name)
            for arr in (t.data, m, v):
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        f.write(struct.pack("<Q", store.step_count))
        f.write(struct.pack("<I", len(extra)))
        f.write(extra)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes at offset {self.off}"
            )
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load(path) -> tuple[ParamStore, bytes]:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"bad magic at offset 0: not a {MAGIC.decode()} checkpoint")
    store = ParamStore(dtype=np.float32)
    count = r.u32()
    for _ in range(count):
        nlen = r.u32()
        name = r.take(nlen).decode("utf-8")
        rank = r.u32()
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arrs = []
        for _ in range(3):
            raw = r.take(4 * size)
            arrs.append(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
        t = store.create(name, arrs[0])
        store._m[name][...] = arrs[1]
        store._v[name][...] = arrs[2]
    store.step_count = r.u64()
    extra_len = r.u32()
    extra = r.take(extra_len)
    return store, extra
