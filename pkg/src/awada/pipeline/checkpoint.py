"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"AWCK"  u32 version
    u32 header length, UTF-8 JSON header (stage, config hash, metadata)
    u32 block count
    per block: u32 name length, name, u32 ndim, u64 dims..., float64 data
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

MAGIC = b"AWCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, stage: str, config_hash: str, arrays: Dict[str, np.ndarray],
                    meta: Dict[str, Any] = None) -> None:
    header = json.dumps({"stage": stage, "config_hash": config_hash, "meta": meta or {}},
                        sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.array(arrays[name], dtype="<f8", order="C")
        enc = name.encode()
        parts.append(struct.pack("<I", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def load_checkpoint(path, expected_hash: str = None, force: bool = False
                    ) -> Tuple[str, Dict[str, Any], Dict[str, np.ndarray]]:
    """Return (stage, meta, arrays); refuses a config-hash mismatch unless ``force``."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if len(raw) < 44 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not an AWCK checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checksum mismatch in {path}")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    (hlen,) = struct.unpack_from("<I", body, 8)
    header = json.loads(body[12:12 + hlen].decode())
    off = 12 + hlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", body, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if expected_hash is not None and header["config_hash"] != expected_hash and not force:
        raise CheckpointError(
            f"{path} was written with config hash {header['config_hash']}, current is {expected_hash}; "
            "pass force to load anyway")
    return header["stage"], header["meta"], arrays
