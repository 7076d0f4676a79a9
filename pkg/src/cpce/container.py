"""Portable named-array container.

Layout (all integers little-endian)::

    b"CPCE"            magic
    u32                version
    u32                entry count
    per entry:
        u16            name length in bytes
        bytes          UTF-8 name
        u8             ndim
        u32 * ndim     dims
        f32 * prod     row-major values

Everything is stored as IEEE-754 float32; non-float inputs are cast.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"CPCE"
VERSION = 1


class ContainerFormatError(ValueError):
    """Malformed container; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _as_array(value) -> np.ndarray:
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value, dtype="<f4")
    # ascontiguousarray would promote 0-d arrays to 1-d
    return np.ascontiguousarray(arr).reshape(arr.shape)


def encode_container(arrays: Mapping[str, object]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, value in arrays.items():
        arr = _as_array(value)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"{name}: too many dimensions")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_container(buf: bytes) -> dict[str, np.ndarray]:
    n = len(buf)

    def need(pos: int, size: int, what: str):
        if pos + size > n:
            raise ContainerFormatError(f"truncated while reading {what}: need {size} bytes, "
                                       f"{n - pos} left", pos)

    need(0, 12, "header")
    if buf[:4] != MAGIC:
        raise ContainerFormatError(f"bad magic {buf[:4]!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerFormatError(f"unsupported version {version}", 4)
    pos = 12
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        need(pos, 2, f"name length of entry {i}")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(pos, name_len, f"name of entry {i}")
        try:
            name = buf[pos:pos + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerFormatError(f"entry {i} name is not UTF-8", pos) from exc
        pos += name_len
        if name in out:
            raise ContainerFormatError(f"duplicate entry name {name!r}", pos - name_len)
        need(pos, 1, f"ndim of {name!r}")
        ndim = buf[pos]
        pos += 1
        need(pos, 4 * ndim, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = 4 * int(np.prod(dims, dtype=np.int64))
        need(pos, size, f"payload of {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(dims).copy()
        pos += size
    if pos != n:
        raise ContainerFormatError(f"{n - pos} trailing bytes after {count} entries", pos)
    return out


def save_container(path, arrays: Mapping[str, object]) -> None:
    data = encode_container(arrays)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_container(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_container(fh.read())


def pack_text(text: str) -> np.ndarray:
    """Store UTF-8 text as a float32 byte vector (exact for 0..255)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype("<f4")


def unpack_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")
