"""Binary checkpoint: named float32 arrays in a flat little-endian stream.

Layout after the 9-byte magic ``APTCKPT1\\n``, repeated per entry::

    u32 name length | name (utf-8) | u32 rank | u32 dim * rank | float32 payload

Everything is little-endian and payloads are row-major. Entry order is
preserved, so writing the same arrays twice yields identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"APTCKPT1\n"
_U32 = struct.Struct("<I")


class CheckpointError(OSError):
    """Malformed, truncated or foreign checkpoint file."""


def encode_checkpoint(entries: dict) -> bytes:
    parts = [MAGIC]
    for name, value in entries.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(n) for n in arr.shape)
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> dict:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic {data[:len(MAGIC)]!r})")
    pos = len(MAGIC)
    out = {}
    name = None

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            where = f"entry {name!r}" if name is not None else f"entry #{len(out)}"
            raise CheckpointError(f"{source}: truncated while reading {what} of {where}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        name = None
        (length,) = _U32.unpack(take(4, "name length"))
        name = take(length, "name").decode("utf-8")
        if name in out:
            raise CheckpointError(f"{source}: duplicate entry {name!r}")
        (rank,) = _U32.unpack(take(4, "rank"))
        shape = tuple(_U32.unpack(take(4, "shape"))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        payload = take(4 * count, "payload")
        out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    return out


def save_checkpoint(path, entries: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(entries))


def load_checkpoint(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
