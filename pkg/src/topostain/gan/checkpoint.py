"""TAGW checkpoint files: named little-endian float64 parameter blocks.

Layout: ``b"TAGW"``, ``u32`` version, then until EOF one block per tensor:
``u16`` name length, UTF-8 name, ``u8`` rank, ``u32`` per dimension, payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"TAGW"
VERSION = 1


def write_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise ValueError(f"cannot encode block {name!r}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a TAGW checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 8 * count
            if end > len(raw):
                raise ValueError("truncated payload")
            out[name] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(dims).astype(np.float64)
            pos = end
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from exc
    return out
