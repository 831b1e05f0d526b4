"""Binary file formats: DSAD datasets and DSAV checkpoints.

Both formats are little-endian and store floating payloads as f32.

DSAD::

    "DSAD" | version u16 | H u16 | W u16 | C u16 | count u32
    per example: y u8 | s u8 | n_spurious u8 | u16 ids | n_real u8 | u16 ids
                 | pixels f32[C*H*W]

DSAV::

    "DSAV" | version u16 | tensor count u32
    per tensor: name length u16 | utf-8 name | rank u8 | dims u32[rank] | payload

The payload is f32 for every tensor except ``__config``, which holds JSON
text as u8 bytes (rank 1).
"""

from __future__ import annotations

import io
import json
import os
import struct
from typing import BinaryIO

import numpy as np

DATASET_MAGIC = b"DSAD"
CHECKPOINT_MAGIC = b"DSAV"
VERSION = 1
CONFIG_KEY = "__config"


class FormatError(Exception):
    """Base class for malformed DSAD / DSAV files. ``code`` identifies the failure."""

    code = "format"


class BadMagicError(FormatError):
    code = "bad_magic"


class VersionMismatchError(FormatError):
    code = "version_mismatch"


class TruncatedPayloadError(FormatError):
    code = "truncated_payload"


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"{self.what}: truncated payload at byte {self.pos} (needed {n} more, "
                f"{len(self.buf) - self.pos} left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def header(self, magic: bytes) -> None:
        got = self.take(4) if len(self.buf) >= 4 else self.buf
        if got != magic:
            raise BadMagicError(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        version = self.unpack("<H")
        if version != VERSION:
            raise VersionMismatchError(f"{self.what}: version {version}, expected {VERSION}")


def _write_atomic(path: str | os.PathLike, data: bytes) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# DSAD


def encode_dataset(images: np.ndarray, y, s, spurious, real) -> bytes:
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError(f"images must be (N, C, H, W), got {images.shape}")
    n, c, h, w = images.shape
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<HHHHI", VERSION, h, w, c, n))
    pix = images.astype("<f4")
    for i in range(n):
        out.write(struct.pack("<BB", int(y[i]), int(s[i])))
        for ids in (spurious[i], real[i]):
            ids = sorted(int(j) for j in ids)
            out.write(struct.pack("<B", len(ids)))
            out.write(struct.pack(f"<{len(ids)}H", *ids))
        out.write(pix[i].tobytes())
    return out.getvalue()


def decode_dataset(buf: bytes, what: str = "dataset"):
    r = _Reader(buf, what)
    r.header(DATASET_MAGIC)
    h, w, c, n = r.unpack("<HHHI")
    npix = c * h * w
    images = np.empty((n, c, h, w), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    spurious, real = [], []
    for i in range(n):
        y[i], s[i] = r.unpack("<BB")
        for bucket in (spurious, real):
            k = r.unpack("<B")
            ids = struct.unpack(f"<{k}H", r.take(2 * k))
            bucket.append(tuple(ids))
        images[i] = np.frombuffer(r.take(4 * npix), dtype="<f4").reshape(c, h, w)
    if r.pos != len(buf):
        raise FormatError(f"{what}: {len(buf) - r.pos} trailing bytes after {n} examples")
    return images, y, s, spurious, real


# ---------------------------------------------------------------------------
# DSAV


def encode_checkpoint(tensors: dict[str, np.ndarray], config: dict) -> bytes:
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<HI", VERSION, len(tensors) + 1))
    entries = [(CONFIG_KEY, None)] + list(tensors.items())
    for name, arr in entries:
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        if arr is None:
            payload = json.dumps(config, sort_keys=True).encode("utf-8")
            out.write(struct.pack("<BI", 1, len(payload)))
            out.write(payload)
            continue
        arr = np.asarray(arr)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.astype("<f4").tobytes())
    return out.getvalue()


def decode_checkpoint(buf: bytes, what: str = "checkpoint") -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf, what)
    r.header(CHECKPOINT_MAGIC)
    count = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    config = None
    for _ in range(count):
        name = r.take(r.unpack("<H")).decode("utf-8")
        rank = r.unpack("<B")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        if name == CONFIG_KEY:
            config = json.loads(r.take(size).decode("utf-8"))
        else:
            tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float64)
    if config is None:
        raise FormatError(f"{what}: missing {CONFIG_KEY} entry")
    return tensors, config


def write_bytes(path, data: bytes) -> None:
    _write_atomic(path, data)


def read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()
