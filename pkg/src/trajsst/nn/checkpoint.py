"""Binary checkpoint format (little-endian).

    magic b"TCKP" | version u32 | count u32 |
    per parameter: name_len u16 | utf-8 name | rank u8 | extents u32[rank] | float32 values
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import BadMagicError, FormatError, TruncatedFileError, UnsupportedVersionError

MAGIC = b"TCKP"
VERSION = 1


def encode_checkpoint(state: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, value in state.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.what}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    r = _Reader(buf, "checkpoint")
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"checkpoint: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint: version {version}, expected {VERSION}")
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"checkpoint: parameter name is not utf-8 ({exc.reason})") from None
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    return state


def save_checkpoint(state: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes())
