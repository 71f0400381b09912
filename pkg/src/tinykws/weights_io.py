"""KWSW weights container.

Little-endian layout::

    b"KWSW"  u16 version  u16 entry count
    per entry:
        u16 name length, UTF-8 name
        u8 dtype (0 = float32, 1 = int8 fixed point)
        i8 fraction length            (dtype 1 only)
        u32 rank, rank x u32 dims
        raw payload (row-major)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .quant import QTensor

MAGIC = b"KWSW"
VERSION = 1
FLOAT32, FIXED8 = 0, 1


class WeightsFormatError(ValueError):
    pass


def dumps_weights(weights: dict) -> bytes:
    out = [MAGIC, struct.pack("<HH", VERSION, len(weights))]
    for name, value in weights.items():
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        if isinstance(value, QTensor):
            codes = np.ascontiguousarray(value.codes, dtype="<i1")
            out.append(struct.pack("<Bb", FIXED8, value.frac_bits))
            payload = codes.tobytes()
            shape = codes.shape
        else:
            arr = np.ascontiguousarray(value, dtype="<f4")
            out.append(struct.pack("<B", FLOAT32))
            payload = arr.tobytes()
            shape = arr.shape
        out.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        out.append(payload)
    return b"".join(out)


def loads_weights(data: bytes) -> dict:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise WeightsFormatError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise WeightsFormatError("truncated weights file")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, count = take("<HH")
    if version != VERSION:
        raise WeightsFormatError(f"unsupported version {version}")
    weights = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (dtype,) = take("<B")
        frac = None
        if dtype == FIXED8:
            (frac,) = take("<b")
        elif dtype != FLOAT32:
            raise WeightsFormatError(f"{name}: unknown dtype code {dtype}")
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        itemsize = 4 if dtype == FLOAT32 else 1
        nbytes = int(np.prod(shape, dtype=np.int64)) * itemsize
        if pos + nbytes > len(view):
            raise WeightsFormatError(f"{name}: truncated payload")
        arr = np.frombuffer(view[pos:pos + nbytes], dtype="<f4" if dtype == FLOAT32 else "<i1")
        arr = arr.reshape(shape).copy()
        pos += nbytes
        weights[name] = QTensor(arr.astype(np.int8), frac) if dtype == FIXED8 else arr.astype(np.float32)
    if pos != len(view):
        raise WeightsFormatError(f"{len(view) - pos} trailing bytes")
    return weights


def save_weights(weights: dict, path) -> None:
    Path(path).write_bytes(dumps_weights(weights))


def load_weights(path) -> dict:
    return loads_weights(Path(path).read_bytes())


ACT_PREFIX = "act/"


def pack_quantized(qweights: dict, act_formats: dict) -> dict:
    """Merge quantized weights and activation formats into one container dict.

    Activation formats travel as empty fixed-point entries named ``act/<key>``.
    """
    packed = dict(qweights)
    for key, frac in act_formats.items():
        packed[ACT_PREFIX + key] = QTensor(np.zeros(0, dtype=np.int8), int(frac))
    return packed


def unpack_quantized(weights: dict) -> tuple[dict, dict]:
    qweights, formats = {}, {}
    for name, value in weights.items():
        if name.startswith(ACT_PREFIX):
            formats[name[len(ACT_PREFIX):]] = value.frac_bits
        else:
            qweights[name] = value
    return qweights, formats


def is_quantized(weights: dict) -> bool:
    return bool(weights) and all(isinstance(v, QTensor) for v in weights.values())
