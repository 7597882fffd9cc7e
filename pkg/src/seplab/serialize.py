"""Binary parameter container used for checkpoints and equivalence audits.

Layout (all integers little-endian)::

    b"SCLB"  u16 version
    repeated until EOF:
        u16 name_length, UTF-8 name, 4 x u32 extents, float64 payload in flat NCHW order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCLB"
VERSION = 1


def dumps_params(params: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, value in params.items():
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"parameter {name!r} must be 4-D, got shape {arr.shape}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<4I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(chunks)


def loads_params(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("not an SCLB parameter file (bad magic)")
    if len(blob) < 6:
        raise ValueError("truncated SCLB header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported SCLB version {version}")
    pos = 6
    params: dict[str, np.ndarray] = {}
    while pos < len(blob):
        try:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            dims = struct.unpack_from("<4I", blob, pos)
            pos += 16
        except struct.error as exc:
            raise ValueError("truncated SCLB record header") from exc
        count = int(np.prod(dims))
        end = pos + 8 * count
        if end > len(blob):
            raise ValueError(f"truncated payload for parameter {name!r}")
        params[name] = np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64).reshape(dims)
        pos = end
    return params


def save_params(path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_params(params))


def load_params(path) -> dict[str, np.ndarray]:
    return loads_params(Path(path).read_bytes())
