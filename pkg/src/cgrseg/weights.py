"""Portable binary weight archive.

Layout (all integers little-endian u32):

    magic "CGRW" | version | tensor count |
    per tensor: name length, UTF-8 name, rank, dims[rank], payload

Payloads are little-endian 32-bit floats, row-major.  Tensors are stored
and restored in registry order, so save -> load -> save is byte-identical.
Values live as f64 in memory; one save/load trip quantizes them to f32
(relative error <= 1e-6 for normal floats), after which further trips are
exact.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

from .model import ModelParams, named_tensors
from .tensor import Tensor

__all__ = ["MAGIC", "VERSION", "save_weights", "load_weights",
           "apply_weights", "model_weight_rows"]

MAGIC = b"CGRW"
VERSION = 1


def model_weight_rows(params: ModelParams) -> list[tuple[str, Tensor]]:
    """Every tensor the archive must carry: learnables and running stats."""
    return [(name, t) for name, _, t in named_tensors(params)]


def save_weights(path: str, rows: Sequence[tuple[str, Tensor]]) -> None:
    seen = set()
    blob = [MAGIC, struct.pack("<II", VERSION, len(rows))]
    for name, t in rows:
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        encoded = name.encode("utf-8")
        blob.append(struct.pack("<I", len(encoded)))
        blob.append(encoded)
        dims = t.dims
        blob.append(struct.pack("<I", len(dims)))
        blob.append(struct.pack(f"<{len(dims)}I", *dims))
        blob.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError(
                f"{self.path}: truncated while reading {what} "
                f"(need {self.pos + n} bytes, file has {len(self.buf)})"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_weights(path: str) -> dict[str, np.ndarray]:
    """Read an archive into an ordered name -> f64 array mapping."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4, "magic") != MAGIC:
        raise ValueError(f"{path}: not a weight file (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    count = r.u32("tensor count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen = r.u32("name length")
        name = r.take(nlen, "name").decode("utf-8")
        if name in out:
            raise ValueError(f"{path}: duplicate tensor name {name!r}")
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        numel = 1
        for d in dims:
            numel *= d
        payload = r.take(4 * numel, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        out[name] = arr.reshape(dims)
    if r.pos != len(r.buf):
        raise ValueError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return out


def apply_weights(params: ModelParams, loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays onto a parameter set, name- and shape-checked."""
    rows = model_weight_rows(params)
    want = {name for name, _ in rows}
    missing = sorted(want - set(loaded))
    extra = sorted(set(loaded) - want)
    if missing or extra:
        raise ValueError(
            f"weight/config mismatch: missing {missing or 'none'}, "
            f"unexpected {extra or 'none'}"
        )
    for name, t in rows:
        arr = loaded[name]
        if tuple(arr.shape) != t.dims:
            raise ValueError(
                f"tensor {name!r}: file shape {tuple(arr.shape)} does not "
                f"match model shape {t.dims}"
            )
        t.data[...] = arr
