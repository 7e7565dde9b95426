"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"SLIPCKPT"  u32 version
    u64 header length, header (UTF-8 JSON, sorted keys)
    u32 record count, then per record:
        u16 name length, name (UTF-8), u8 dtype code, u8 ndim, ndim x u64 extents, raw data
    u32 CRC-32 of every preceding byte

The header carries the config fingerprint, step counters and the resolved
config.  Serialization is canonical, so save -> load -> save reproduces the
file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from ..errors import (
    CheckpointCorruptError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    FingerprintMismatchError,
)

MAGIC = b"SLIPCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def fingerprint(config: dict) -> str:
    """Stable hash of a JSON-serializable config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    header: dict[str, Any]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.header.get("step", 0))

    @property
    def fingerprint(self) -> Optional[str]:
        return self.header.get("fingerprint")

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"{self.source}: file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(buf, source)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointCorruptError(f"{source}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{source}: format version {version}, this build reads version {VERSION}")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{source}: unreadable header ({exc})") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointCorruptError(f"{source}: record {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CheckpointCorruptError(f"{source}: {len(buf) - r.pos} trailing bytes")
    if zlib.crc32(buf[:body_end]) != crc:
        raise CheckpointCorruptError(f"{source}: checksum mismatch")
    return Checkpoint(header, tensors)


def write_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def read_checkpoint(path: Union[str, Path], expect_fingerprint: Optional[str] = None, allow_mismatch: bool = False) -> Checkpoint:
    path = Path(path)
    ckpt = decode_checkpoint(path.read_bytes(), str(path))
    if expect_fingerprint is not None and not allow_mismatch and ckpt.fingerprint != expect_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: checkpoint config fingerprint {ckpt.fingerprint} != current {expect_fingerprint}"
        )
    return ckpt
