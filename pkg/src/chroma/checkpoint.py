"""Binary checkpoint files.

Layout (all integers little-endian uint32, floats little-endian
float32):

    magic "CNATTN1"
    vocabulary: count, then per name (byte length, utf-8 bytes)
    config text: byte length, utf-8 bytes (hyperparameters, anchors,
        resume counters as key = value lines)
    parameter records: count, then per record
        (name length, name, ndim, dims..., raw float32 values)
    optimizer state: record count, then records in the same encoding
        (velocity buffers under "velocity/<param>", scalars under
        "optimizer/<field>")

Parameters are stored in 32-bit; training keeps its parameters in 32-bit
too, so a save/load round trip reproduces forward passes bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["Checkpoint", "write_checkpoint", "read_checkpoint", "MAGIC"]

MAGIC = b"CNATTN1"
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    vocabulary: tuple[str, ...]
    config_text: str
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)


def _write_u32(f, value: int) -> None:
    f.write(_U32.pack(value))


def _write_str(f, s: str) -> None:
    raw = s.encode("utf-8")
    _write_u32(f, len(raw))
    f.write(raw)


def _write_records(f, records: dict[str, np.ndarray]) -> None:
    _write_u32(f, len(records))
    for name, arr in records.items():
        arr = np.asarray(arr, dtype=_F32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy()
        _write_str(f, name)
        _write_u32(f, arr.ndim)
        for d in arr.shape:
            _write_u32(f, d)
        f.write(arr.tobytes())


def _read_u32(f, path) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError(f"{path}: truncated checkpoint")
    return _U32.unpack(raw)[0]


def _read_str(f, path) -> str:
    n = _read_u32(f, path)
    raw = f.read(n)
    if len(raw) != n:
        raise ValueError(f"{path}: truncated checkpoint")
    return raw.decode("utf-8")


def _read_records(f, path) -> dict[str, np.ndarray]:
    count = _read_u32(f, path)
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = _read_str(f, path)
        ndim = _read_u32(f, path)
        shape = tuple(_read_u32(f, path) for _ in range(ndim))
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        raw = f.read(n_bytes)
        if len(raw) != n_bytes:
            raise ValueError(f"{path}: truncated record {name!r}")
        records[name] = np.frombuffer(raw, dtype=_F32).reshape(shape).copy()
    return records


def write_checkpoint(path, vocabulary, config_text: str,
                     params: dict[str, np.ndarray],
                     optimizer: dict[str, np.ndarray] | None = None) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        _write_u32(f, len(vocabulary))
        for name in vocabulary:
            _write_str(f, name)
        _write_str(f, config_text)
        _write_records(f, params)
        _write_records(f, optimizer or {})


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a {MAGIC.decode()} checkpoint")
        n_vocab = _read_u32(f, path)
        vocabulary = tuple(_read_str(f, path) for _ in range(n_vocab))
        config_text = _read_str(f, path)
        params = _read_records(f, path)
        optimizer = _read_records(f, path)
    return Checkpoint(vocabulary=vocabulary, config_text=config_text,
                      params=params, optimizer=optimizer)
