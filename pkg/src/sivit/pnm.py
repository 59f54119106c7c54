"""Binary portable pixmap (P6) and graymap (P5) reading and writing.

Only 8-bit samples (maxval <= 255) are supported. Headers are written as
``P6\\n<w> <h>\\n<maxval>\\n``; the reader also accepts arbitrary whitespace
and ``#`` comments between header tokens.
"""

from __future__ import annotations

import os

import numpy as np


class PnmError(ValueError):
    pass


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise PnmError(f"PPM data must be uint8 HxWx3, got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()


def encode_pgm(gray: np.ndarray, maxval: int = 255) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise PnmError(f"PGM data must be uint8 HxW, got {gray.dtype} {gray.shape}")
    if not 1 <= maxval <= 255:
        raise PnmError(f"unsupported maxval {maxval}")
    if gray.size and int(gray.max()) > maxval:
        raise PnmError(f"PGM sample {int(gray.max())} exceeds maxval {maxval}")
    h, w = gray.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + np.ascontiguousarray(gray).tobytes()


def _parse_header(buf: bytes, name: str) -> tuple[bytes, int, int, int, int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(buf):
            raise PnmError(f"{name}: truncated header")
        c = buf[pos:pos + 1]
        if c == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PnmError(f"{name}: missing whitespace after header")
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PnmError(f"{name}: corrupt header {tokens!r}") from exc
    if w <= 0 or h <= 0 or not 1 <= maxval <= 255:
        raise PnmError(f"{name}: unsupported header values w={w} h={h} maxval={maxval}")
    return magic, w, h, maxval, pos + 1


def decode(buf: bytes, name: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode P5/P6 bytes into (uint8 array, maxval)."""
    magic, w, h, maxval, offset = _parse_header(buf, name)
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise PnmError(f"{name}: unknown magic {magic!r}")
    need = w * h * channels
    raster = buf[offset:]
    if len(raster) != need:
        raise PnmError(f"{name}: expected {need} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).copy()
    if arr.size and int(arr.max()) > maxval:
        raise PnmError(f"{name}: sample value {int(arr.max())} exceeds maxval {maxval}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape), maxval


def write_ppm(path: str | os.PathLike, rgb: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb))


def write_pgm(path: str | os.PathLike, gray: np.ndarray, maxval: int = 255) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(gray, maxval))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = decode(fh.read(), str(path))
    if arr.ndim != 3:
        raise PnmError(f"{path}: expected a P6 pixmap")
    return arr


def read_pgm(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        arr, maxval = decode(fh.read(), str(path))
    if arr.ndim != 2:
        raise PnmError(f"{path}: expected a P5 graymap")
    return arr, maxval
