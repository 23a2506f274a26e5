"""NNCK checkpoint files.

Layout (little endian)::

    b"NNCK" | 32-byte sha256 of the model config text
    | u32 meta length | meta JSON (UTF-8)
    | u32 tensor count
    | per tensor: u16 name length | name | u8 ndim | u32 dims... | float32 data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig

MAGIC = b"NNCK"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], cfg: ModelConfig, meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, cfg.digest(), struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Read parameters (float32) and metadata; verify the config digest if ``cfg`` is given."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an NNCK checkpoint")
    digest = raw[4:36]
    if cfg is not None and digest != cfg.digest():
        raise CheckpointError(f"{path}: checkpoint was written for a different model config")
    pos = 36
    try:
        (mlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        meta = json.loads(raw[pos : pos + mlen].decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if shape else 1
            if pos + 4 * n > len(raw):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except struct.error:
        raise CheckpointError(f"{path}: truncated checkpoint") from None
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return params, meta
