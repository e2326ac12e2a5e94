"""SLTT tensor container.

Record layout (little-endian)::

    b"SLTT" | version u32 | rank u32 | shape u64 * rank | float64 * prod(shape)

A named file is a concatenation of ``name_len u32 | utf-8 name | record``.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"SLTT"
VERSION = 1


class ContainerError(ValueError):
    pass


def write_record(fh: BinaryIO, arr) -> None:
    a = np.asarray(arr, dtype="<f8")
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(a.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    pos = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated {what} at byte {pos}: wanted {n}, got {len(buf)}")
    return buf


def read_record(fh: BinaryIO) -> np.ndarray:
    pos = fh.tell()
    magic = _read_exact(fh, 4, "magic")
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r} at byte {pos}")
    version, rank = struct.unpack("<II", _read_exact(fh, 8, "header"))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} at byte {pos}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "shape"))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count, "data"), dtype="<f8")
    return data.astype(np.float64).reshape(shape)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_record(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_record(fh)


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_record(buf, arr)
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    fh = io.BytesIO(blob)
    out: dict[str, np.ndarray] = {}
    while fh.tell() < len(blob):
        (n,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
        name = _read_exact(fh, n, "name").decode("utf-8")
        out[name] = read_record(fh)
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
