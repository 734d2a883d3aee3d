"""Binary PPM (P6) and PGM (P5) reading and writing.

Only maxval 255 is supported.  Writers emit the canonical header
``P6\\n<w> <h>\\n255\\n`` (``P5`` for gray), so write(read(file)) is
byte-identical for canonically written files.  Readers accept arbitrary
whitespace and ``#`` comments between header tokens (after the magic),
per the format definition.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["read_ppm", "read_pgm", "write_ppm", "write_pgm"]


def _parse_header(buf: bytes, path: str, magic: bytes):
    if buf[:2] != magic:
        raise ValueError(f"{path}: bad magic {buf[:2]!r}, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise ValueError(f"{path}: header ended before width/height/maxval")
        ch = buf[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            raise ValueError(f"{path}: unexpected header byte {ch!r}")
    if pos >= len(buf) or buf[pos:pos + 1] not in b" \t\r\n":
        raise ValueError(f"{path}: missing whitespace after maxval")
    pos += 1  # single whitespace byte separates header from payload
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise ValueError(f"{path}: invalid dimensions {w}x{h}")
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    return w, h, pos


def _payload(buf: bytes, pos: int, count: int, path: str) -> np.ndarray:
    got = len(buf) - pos
    if got < count:
        raise ValueError(
            f"{path}: truncated payload, expected {count} bytes, got {got}"
        )
    if got > count:
        raise ValueError(
            f"{path}: {got - count} trailing bytes after payload"
        )
    return np.frombuffer(buf, dtype=np.uint8, offset=pos)


def read_ppm(path: str) -> Tensor:
    """Read a binary P6 file into a (1, 3, H, W) tensor of values k/255."""
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, pos = _parse_header(buf, path, b"P6")
    flat = _payload(buf, pos, 3 * h * w, path)
    img = flat.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
    return Tensor(img[None], copy=False)


def read_pgm(path: str) -> np.ndarray:
    """Read a binary P5 file into an (H, W) uint8 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, pos = _parse_header(buf, path, b"P5")
    return _payload(buf, pos, h * w, path).reshape(h, w).copy()


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str, img: Tensor | np.ndarray) -> None:
    """Write RGB data as binary P6.

    Accepts a (1, 3, H, W) or (3, H, W) float array in [0, 1], or an
    (H, W, 3) uint8 array which is written verbatim.
    """
    if isinstance(img, Tensor):
        img = img.data
    img = np.asarray(img)
    if img.dtype == np.uint8:
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"uint8 image must be (H, W, 3), got {img.shape}")
        hwc = img
    else:
        if img.ndim == 4 and img.shape[0] == 1:
            img = img[0]
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError(f"float image must be (3, H, W), got {img.shape}")
        hwc = _to_u8(img).transpose(1, 2, 0)
    h, w, _ = hwc.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(hwc).tobytes())


def write_pgm(path: str, gray: np.ndarray) -> None:
    """Write an (H, W) array as binary P5; uint8 verbatim, floats in [0, 1]."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"gray image must be (H, W), got {gray.shape}")
    data = gray if gray.dtype == np.uint8 else _to_u8(gray)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())
