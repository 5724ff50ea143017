"""Binary PPM (P6) and PGM (P5) reading and writing."""
from __future__ import annotations

import os

import numpy as np

from ..errors import ParseError

_WHITESPACE = b" \t\n\r\v\f"


def _read_header(data: bytes, magic: bytes, fields: int) -> tuple[list[int], int]:
    if data[:2] != magic:
        raise ParseError(f"expected magic {magic.decode()}, got {data[:2]!r}", "byte offset 0")
    pos = 2
    values = []
    while len(values) < fields:
        while pos < len(data) and data[pos] in _WHITESPACE:
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("malformed header", f"byte offset {pos}")
        values.append(int(data[start:pos]))
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise ParseError("missing whitespace after header", f"byte offset {pos}")
    return values, pos + 1


def _raster(data: bytes, offset: int, count: int, maxval: int) -> np.ndarray:
    if not 0 < maxval < 65536:
        raise ParseError(f"maxval {maxval} outside 1..65535", "header")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = count * dtype.itemsize
    have = len(data) - offset
    if have < need:
        raise ParseError(
            f"truncated raster: expected {need} bytes, found {have}",
            f"byte offset {len(data)}",
        )
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    if arr.max(initial=0) > maxval:
        raise ParseError("sample exceeds maxval", f"byte offset {offset}")
    return arr


def decode_ppm(data: bytes) -> tuple[np.ndarray, int]:
    """Decode P6 bytes into ``[H, W, 3]`` samples and maxval."""
    (w, h, maxval), offset = _read_header(data, b"P6", 3)
    arr = _raster(data, offset, w * h * 3, maxval)
    return arr.reshape(h, w, 3).copy(), maxval


def decode_pgm(data: bytes) -> tuple[np.ndarray, int]:
    """Decode P5 bytes into ``[H, W]`` samples and maxval."""
    (w, h, maxval), offset = _read_header(data, b"P5", 3)
    arr = _raster(data, offset, w * h, maxval)
    return arr.reshape(h, w).copy(), maxval


def encode_ppm(rgb: np.ndarray, maxval: int = 255) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs [H, W, 3] samples, got {rgb.shape}")
    h, w, _ = rgb.shape
    dtype = ">u2" if maxval > 255 else "u1"
    return b"P6\n%d %d\n%d\n" % (w, h, maxval) + rgb.astype(dtype).tobytes()


def encode_pgm(gray: np.ndarray, maxval: int = 255) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs [H, W] samples, got {gray.shape}")
    h, w = gray.shape
    dtype = ">u2" if maxval > 255 else "u1"
    return b"P5\n%d %d\n%d\n" % (w, h, maxval) + gray.astype(dtype).tobytes()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_ppm(data)[0]
    except ParseError as exc:
        err = ParseError(f"{os.fspath(path)}: {exc}")
        err.location = exc.location
        raise err from None


def read_pgm(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_pgm(data)
    except ParseError as exc:
        err = ParseError(f"{os.fspath(path)}: {exc}")
        err.location = exc.location
        raise err from None


def write_ppm(path, rgb: np.ndarray, maxval: int = 255) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb, maxval))


def write_pgm(path, gray: np.ndarray, maxval: int = 255) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(gray, maxval))
