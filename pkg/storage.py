"""Atomic file output and the little-endian primitives shared by the binary formats.

Both binary formats start with the same header: 4-byte magic, u16 version, u32 D, u64 count.
Strings are u32 length-prefixed UTF-8.
"""
import contextlib
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO, Iterator, Tuple

import numpy as np

from errors import FormatError

FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHIQ")
_U32 = struct.Struct("<I")
F32 = np.dtype("<f4")


@contextlib.contextmanager
def atomic_write(path, mode: str = "wb") -> Iterator:
    """Write to a temp file next to ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        if "b" in mode:
            fh = os.fdopen(fd, mode)
        else:
            fh = os.fdopen(fd, mode, encoding="utf-8", newline="")
        with fh:
            yield fh
        os.replace(tmp_name, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp_name)
        raise


def read_exact(fh: BinaryIO, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise FormatError(f"Truncated file while reading {what}")
    return data


def read_u32(fh: BinaryIO, what: str) -> int:
    (value,) = _U32.unpack(read_exact(fh, _U32.size, what))
    return value


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(_U32.pack(value))


def read_string(fh: BinaryIO, what: str) -> str:
    length = read_u32(fh, f"{what} length")
    try:
        return read_exact(fh, length, what).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"Invalid UTF-8 in {what}: {e}") from None


def write_string(fh: BinaryIO, value: str) -> None:
    encoded = value.encode("utf-8")
    write_u32(fh, len(encoded))
    fh.write(encoded)


def write_header(fh: BinaryIO, magic: bytes, dim: int, count: int) -> None:
    fh.write(_HEADER.pack(magic, FORMAT_VERSION, dim, count))


def read_header(fh: BinaryIO, magic: bytes) -> Tuple[int, int]:
    found, version, dim, count = _HEADER.unpack(read_exact(fh, _HEADER.size, "header"))
    if found != magic:
        raise FormatError(f"Bad magic {found!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported format version {version}")
    return dim, count


def read_floats(fh: BinaryIO, count: int, what: str) -> np.ndarray:
    values = np.frombuffer(read_exact(fh, count * F32.itemsize, what), dtype=F32)
    if not np.isfinite(values).all():
        raise FormatError(f"NaN/Inf values in {what}")
    return values.astype(np.float32)


def write_floats(fh: BinaryIO, values: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(values, dtype=F32).tobytes())


def expect_eof(fh: BinaryIO, what: str) -> None:
    if fh.read(1):
        raise FormatError(f"Trailing bytes after {what}")
