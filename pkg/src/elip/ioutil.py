"""Shared machinery for the binary container formats.

All containers follow the same scheme: an ASCII magic line, a text header
of ``key=value`` lines terminated by a line reading ``end``, then raw
little-endian float32 payload (plus fixed-width integer fields where a
format says so).
"""

from __future__ import annotations

import numpy as np


class FormatError(ValueError):
    """Wrong magic or malformed header."""


class TruncatedFileError(ValueError):
    """File ended before the declared payload did."""


def expect_magic(f, magic: bytes, path: str = "") -> None:
    got = f.read(len(magic))
    if got != magic:
        raise FormatError(
            f"{path or 'file'}: expected magic {magic!r}, got {got!r}")


def read_header_lines(f, path: str = "") -> list[str]:
    """Read text lines up to and excluding the ``end`` terminator."""
    lines = []
    while True:
        raw = f.readline()
        if not raw:
            raise TruncatedFileError(f"{path or 'file'}: header ended without 'end'")
        line = raw.decode("utf-8").rstrip("\n")
        if line == "end":
            return lines
        lines.append(line)


def header_dict(lines: list[str]) -> dict[str, str]:
    """Parse ``key=value`` lines; repeated keys keep the last value."""
    out = {}
    for line in lines:
        if "=" not in line:
            raise FormatError(f"malformed header line: {line!r}")
        key, value = line.split("=", 1)
        out[key] = value
    return out


def read_exact(f, n: int, path: str = "") -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(
            f"{path or 'file'}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_f32(f, shape: tuple, path: str = "") -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    buf = read_exact(f, 4 * count, path)
    return np.frombuffer(buf, dtype="<f4").reshape(shape).copy()


def write_f32(f, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def parse_shape(text: str) -> tuple:
    return tuple(int(s) for s in text.split(",") if s)


def shape_str(shape: tuple) -> str:
    return ",".join(str(int(s)) for s in shape)
