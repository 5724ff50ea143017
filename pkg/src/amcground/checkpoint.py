"""Binary checkpoints: parameters, Adam moments, step counter and RNG state.

Layout (little-endian)::

    b"AMCK" | u32 version | u32 n | n bytes config JSON
    | u64 step | u32 epoch | u32 n | n bytes RNG state JSON
    | tensor table "params" | tensor table "m" | tensor table "v"
    | u32 CRC32 of everything before it

A tensor table is ``u32 count`` followed by, per tensor in name order,
``u16 n | name | u8 dtype | u8 ndim | u32 dims... | raw data``.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumError, IncompatibleVersionError, ParseError

MAGIC = b"AMCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)


def _pack_table(out: list, table: dict[str, np.ndarray]) -> None:
    out.append(struct.pack("<I", len(table)))
    for name in sorted(table):
        arr = np.asarray(table[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _blob(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _blob(ckpt.config),
             struct.pack("<QI", ckpt.step, ckpt.epoch), _blob(ckpt.rng_state)]
    for table in (ckpt.params, ckpt.m, ckpt.v):
        _pack_table(parts, table)
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError("checkpoint truncated", f"byte offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode("utf-8"))

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode("utf-8")
            code, ndim = self.unpack("<BB")
            if code not in _DTYPES:
                raise ParseError(f"unknown dtype code {code}", f"byte offset {self.pos - 2}")
            shape = self.unpack(f"<{ndim}I")
            dtype = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(self.take(size), dtype=dtype).reshape(shape)
            out[name] = arr.astype(dtype.newbyteorder("="))
        return out


def decode(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise ParseError("not a checkpoint (bad magic)", "byte offset 0")
    if len(data) < 12:
        raise ParseError("checkpoint truncated", "byte offset 4")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise IncompatibleVersionError(f"checkpoint format version {version}, expected {VERSION}")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch (file is corrupted)")
    r = _Reader(payload)
    r.take(8)
    config = r.json()
    step, epoch = r.unpack("<QI")
    rng_state = r.json()
    params, m, v = r.table(), r.table(), r.table()
    if r.pos != len(payload):
        raise ParseError("trailing bytes after tensor tables", f"byte offset {r.pos}")
    return Checkpoint(config, params, m, v, step, epoch, rng_state)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
