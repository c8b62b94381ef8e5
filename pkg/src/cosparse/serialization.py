"""Binary tensor archive shared by model checkpoints, masks, scores and prompts.

Layout (all integers little-endian unless noted):

    magic      4 bytes  b"CSPK"
    version    u32
    digest     32 bytes (sha256 of the owning spec's canonical form)
    count      u32      number of tensors
    per tensor:
        name_len u32, name UTF-8 bytes
        dtype    u8   (0 = float32)
        rank     u32
        dims     u64 * rank
        data     raw little-endian float32 values
    meta_len   u32, metadata UTF-8 JSON bytes
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

MAGIC = b"CSPK"
VERSION = 1
_DTYPE_F32 = 0


class ArchiveError(ValueError):
    """Malformed, truncated or incompatible archive file."""


def write_archive(path, tensors: dict[str, np.ndarray], digest: bytes,
                  metadata: Optional[dict] = None) -> None:
    if len(digest) != 32:
        raise ArchiveError(f"digest must be 32 bytes, got {len(digest)}")
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(digest)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", _DTYPE_F32))
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype("<f4", copy=False).tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ArchiveError("archive truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def read_archive(path) -> tuple[dict[str, np.ndarray], bytes, dict]:
    """Returns (tensors, digest, metadata). Raises ArchiveError on any defect."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ArchiveError("bad magic: not a CSPK archive")
    version = r.u32()
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    digest = r.take(32)
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        dtype = r.u8()
        if dtype != _DTYPE_F32:
            raise ArchiveError(f"unknown dtype tag {dtype} for tensor {name!r}")
        rank = r.u32()
        dims = tuple(r.u64() for _ in range(rank))
        total = 1
        for d in dims:
            total *= d
        raw = r.take(total * 4)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(data):
        raise ArchiveError("trailing bytes after archive payload")
    return tensors, digest, meta
