"""Binary checkpoint format.

Layout, all integers little-endian::

    magic    8 bytes  b"SHDWPEFT"
    version  u32
    count    u64
    entry * count:
        name_len u32, name (UTF-8)
        trainable u8
        dtype     u8   (0 = float32, 1 = float64)
        rank      u32
        extents   u64 * rank
        payload   row-major little-endian IEEE-754
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .numerics import Tensor

MAGIC = b"SHDWPEFT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Entry:
    name: str
    data: np.ndarray
    trainable: bool


def save(path, named: Iterable[tuple[str, Tensor]]) -> None:
    entries = [Entry(n, t.data, bool(t.requires_grad)) for n, t in named]
    write_entries(path, entries)


def write_entries(path, entries: list[Entry]) -> None:
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise CheckpointError(f"duplicate entry name {dup!r}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(entries)))
        for e in entries:
            arr = np.asarray(e.data)
            if arr.dtype not in _TAGS:
                raise CheckpointError(f"{e.name}: unsupported dtype {arr.dtype}")
            raw = e.name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BBI", int(e.trainable), _TAGS[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint is truncated")
    return buf


def load(path) -> list[Entry]:
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version, count = struct.unpack("<IQ", _read(fh, 12))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
        entries, seen = [], set()
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read(fh, 4))
            name = _read(fh, nlen).decode("utf-8")
            if name in seen:
                raise CheckpointError(f"duplicate entry name {name!r}")
            seen.add(name)
            trainable, tag, rank = struct.unpack("<BBI", _read(fh, 6))
            if tag not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype tag {tag}")
            shape = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank))
            dt = _DTYPES[tag]
            n = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(_read(fh, n * dt.itemsize), dtype=dt).reshape(shape)
            entries.append(Entry(name, data.astype(dt.newbyteorder("="), copy=True), bool(trainable)))
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last entry")
    return entries


def load_into(model, entries: list[Entry]) -> None:
    """Copy entries into ``model``'s named tensors; names and shapes must match exactly."""
    params = dict(model.named_parameters())
    got = {e.name: e for e in entries}
    missing = sorted(set(params) - set(got))
    extra = sorted(set(got) - set(params))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, t in params.items():
        e = got[name]
        if e.data.shape != t.shape:
            raise CheckpointError(f"{name}: checkpoint shape {e.data.shape} != model shape {t.shape}")
        t.data[...] = e.data
        t.requires_grad = e.trainable
        t.grad = None


def load_file_into(model, path) -> None:
    load_into(model, load(Path(path)))
