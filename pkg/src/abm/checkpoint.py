"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"ABMC"                magic
    u32                    format version
    u32 + bytes            UTF-8 ``key=value`` lines (config, vocabulary, epoch, ...)
    u32                    tensor count
    per tensor:
        u16 + bytes        UTF-8 name
        u8                 dtype code (1 = float32, 2 = float64)
        u8                 rank
        u32 * rank         extents
        bytes              row-major payload
    u64                    number of bytes preceding this field

Names are ``param:<path>``, ``buffer:<path>`` or ``opt:<slot>:<path>``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ABMC"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class FormatError(ValueError):
    """Not a checkpoint of a version this build understands."""


class IntegrityError(IOError):
    """The file is truncated or its length field disagrees with its size."""


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)           # str -> str
    tensors: dict = field(default_factory=dict)        # name -> ndarray

    def names(self, kind: str) -> list[str]:
        pre = kind + ":"
        return [n[len(pre):] for n in self.tensors if n.startswith(pre)]


def encode(ckpt: Checkpoint, version: int = VERSION) -> bytes:
    meta = "".join(f"{k}={v}\n" for k, v in ckpt.meta.items()).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", version), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in CODES:
            raise TypeError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<BB", CODES[arr.dtype], arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<Q", len(body))


class _Reader:
    def __init__(self, buf: bytes, end: int) -> None:
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise IntegrityError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    if len(buf) < 8:
        raise IntegrityError("checkpoint truncated inside header")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    if len(buf) < 16 or struct.unpack("<Q", buf[-8:])[0] != len(buf) - 8:
        raise IntegrityError(f"checkpoint length field does not match file size {len(buf)}")
    r = _Reader(buf, len(buf) - 8)
    r.take(8)
    (n_meta,) = r.unpack("<I")
    meta = {}
    for line in r.take(n_meta).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in DTYPES:
            raise FormatError(f"tensor {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I")
        dt = DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != r.end:
        raise IntegrityError(f"{r.end - r.pos} unexpected bytes after tensor table")
    return Checkpoint(meta, tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename) so a crash never leaves a torn file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
