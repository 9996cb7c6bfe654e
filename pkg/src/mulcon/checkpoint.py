"""Binary tensor container.

Layout (little-endian): magic ``MLCN``, format version u32, tensor count u32,
then per tensor: name length u16, UTF-8 name, rank u8, extents as u32, and the
values as float32.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Union

import numpy as np

MAGIC = b"MLCN"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"rank too large for {name!r}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(buf)
    pos = 0

    def read(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(read(4, "magic")) != MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint file")
    version, count = struct.unpack("<II", read(8, "header"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", read(2, "name length"))
        try:
            name = bytes(read(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("tensor name is not valid UTF-8") from exc
        (rank,) = struct.unpack("<B", read(1, f"rank of {name!r}"))
        shape = struct.unpack(f"<{rank}I", read(4 * rank, f"extents of {name!r}"))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(read(4 * n, f"values of {name!r}"), dtype="<f4").reshape(shape)
        out[name] = data.astype(np.float32)
    if pos != len(view):
        raise CheckpointFormatError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def save_tensors(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    return decode_tensors(Path(path).read_bytes())
