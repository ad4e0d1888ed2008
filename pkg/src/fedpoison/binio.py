"""Little-endian framing shared by the dataset and checkpoint files.

Both formats are ``magic | payload | u32 crc32(payload)``.  The reader keeps
track of its byte offset so every failure can report where it happened.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from fedpoison.errors import FormatError


class Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        self._parts.append(struct.pack("<" + fmt, *values))

    def string(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.pack("I", len(raw))
        self._parts.append(raw)

    def raw(self, data: bytes) -> None:
        self._parts.append(data)

    def payload(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if n < 0 or end > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.offset)
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize("<" + fmt)
        return struct.unpack("<" + fmt, self.take(size, what))

    def string(self, what: str) -> str:
        start = self.offset
        (n,) = self.unpack("I", what + " length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid UTF-8 in {what}", start) from exc

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(count * dt.itemsize, what), dtype=dt)


def frame(magic: bytes, payload: bytes) -> bytes:
    return magic + payload + struct.pack("<I", zlib.crc32(payload))


def unframe(data: bytes, magic: bytes) -> Reader:
    """Check magic and checksum; return a reader positioned after the magic,
    limited to the payload."""
    if data[: len(magic)] != magic:
        raise FormatError(f"bad magic (expected {magic!r})", 0)
    if len(data) < len(magic) + 4:
        raise FormatError("truncated file: missing checksum", len(data))
    payload = data[len(magic) : -4]
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != stored:
        raise FormatError("checksum mismatch", len(data) - 4)
    return Reader(data[:-4], len(magic))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
