"""Little-endian binary helpers shared by the artifact file formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(ValueError):
    """Raised when an artifact file is truncated or has the wrong magic/version."""


def write_header(fh: BinaryIO, magic: bytes, version: int) -> None:
    fh.write(magic)
    fh.write(struct.pack("<I", version))


def read_header(fh: BinaryIO, magic: bytes, versions: tuple[int, ...] = (1,)) -> int:
    got = fh.read(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version not in versions:
        raise FormatError(f"unsupported {magic.decode()} version {version}")
    return version


def write_struct(fh: BinaryIO, fmt: str, *values) -> None:
    fh.write(struct.pack("<" + fmt, *values))


def read_struct(fh: BinaryIO, fmt: str) -> tuple:
    fmt = "<" + fmt
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))


def write_array(fh: BinaryIO, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def read_array(fh: BinaryIO, dtype: str, count: int) -> np.ndarray:
    dt = np.dtype(dtype).newbyteorder("<")
    buf = _read_exact(fh, dt.itemsize * count)
    return np.frombuffer(buf, dtype=dt).astype(np.dtype(dtype).newbyteorder("="))


def write_strings(fh: BinaryIO, values) -> None:
    for v in values:
        raw = v.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def read_strings(fh: BinaryIO, count: int) -> list[str]:
    out = []
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        out.append(_read_exact(fh, n).decode("utf-8"))
    return out


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf
