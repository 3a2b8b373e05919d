"""Binary checkpoint format (little-endian throughout).

::

    magic       4 bytes   b"DAMC"
    version     u32
    config      u32 length + UTF-8 JSON (sorted keys, compact)
    tensors     u32 count, then per tensor:
                  u16 name length, UTF-8 name, u8 ndim, u32 dims[ndim],
                  float32 data in row-major order
    velocity    same layout as tensors (optimizer momentum buffers)
    rng         u64 seed, u64 counter
    episodes    u64
    crc32       u32 over every preceding byte

Any truncation, bounds violation, or flipped byte is reported as
:class:`CheckpointError`.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DAMC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    rng_seed: int = 0
    rng_counter: int = 0
    episodes: int = 0

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<I", VERSION)
        cfg = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out += struct.pack("<I", len(cfg)) + cfg
        _pack_table(out, self.tensors)
        _pack_table(out, self.velocity)
        out += struct.pack("<QQQ", self.rng_seed, self.rng_counter, self.episodes)
        out += struct.pack("<I", zlib.crc32(bytes(out)))
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        r = _Reader(blob)
        if r.take(4) != MAGIC:
            raise CheckpointError("bad magic: not a DAM checkpoint")
        (version,) = r.unpack("<I")
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
        if len(blob) < 4 or zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
            raise CheckpointError("checksum mismatch: checkpoint is corrupt or truncated")
        (n,) = r.unpack("<I")
        try:
            config = json.loads(r.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt config block: {exc}") from None
        tensors = _unpack_table(r)
        velocity = _unpack_table(r)
        seed, counter, episodes = r.unpack("<QQQ")
        r.unpack("<I")
        if r.pos != len(blob):
            raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after checkpoint")
        return cls(config, tensors, velocity, seed, counter, episodes)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _pack_table(out: bytearray, table: dict[str, np.ndarray]) -> None:
    out += struct.pack("<I", len(table))
    for name, arr in table.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr)
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        out += np.ascontiguousarray(a, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, have {len(self.blob) - self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_table(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    table = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        table[name] = data
    return table


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    """Write ``ckpt`` to ``path``; returns the SHA-256 of the bytes written."""
    blob = ckpt.to_bytes()
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())
