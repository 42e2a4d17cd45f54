"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

import os
from typing import BinaryIO

import numpy as np

__all__ = ["PixmapError", "read_pnm", "write_ppm", "write_pgm", "read_ppm", "read_pgm"]


class PixmapError(ValueError):
    pass


def _next_token(fh: BinaryIO) -> bytes:
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            if tok:
                return tok
            raise PixmapError("unexpected end of header")
        if ch == b"#" and not tok:
            fh.readline()
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_pnm(fh: BinaryIO) -> np.ndarray:
    """Read a P5/P6 image; returns uint8 (H, W) or (H, W, 3)."""
    magic = fh.read(2)
    if magic not in (b"P5", b"P6"):
        raise PixmapError(f"unsupported magic {magic!r}")
    try:
        width = int(_next_token(fh))
        height = int(_next_token(fh))
        maxval = int(_next_token(fh))
    except ValueError as exc:
        raise PixmapError("malformed header") from exc
    if width <= 0 or height <= 0:
        raise PixmapError("image dimensions must be positive")
    if maxval != 255:
        raise PixmapError("only 8-bit maps (maxval 255) are supported")
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    raw = fh.read(n)
    if len(raw) != n:
        raise PixmapError("truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)
    return arr[..., 0].copy() if channels == 1 else arr.copy()


def _write(fh: BinaryIO, arr: np.ndarray, magic: bytes) -> None:
    h, w = arr.shape[:2]
    fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
    fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def _as_u8(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255):
            raise PixmapError("pixel values must lie in 0..255")
        arr = arr.astype(np.uint8)
    return arr


def write_ppm(path: str | os.PathLike, image) -> None:
    """Write (H, W, 3) uint8 data, or floats in [0, 1] which are rounded."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise PixmapError("PPM needs an (H, W, 3) array")
    if image.dtype.kind == "f":
        image = np.round(np.clip(image, 0.0, 1.0) * 255.0)
    with open(path, "wb") as fh:
        _write(fh, _as_u8(image), b"P6")


def write_pgm(path: str | os.PathLike, labels) -> None:
    labels = _as_u8(labels)
    if labels.ndim != 2:
        raise PixmapError("PGM needs an (H, W) array")
    with open(path, "wb") as fh:
        _write(fh, labels, b"P5")


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_pnm(fh)
    if arr.ndim != 3:
        raise PixmapError(f"{path} is not a colour (P6) image")
    return arr


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_pnm(fh)
    if arr.ndim != 2:
        raise PixmapError(f"{path} is not a graymap (P5)")
    return arr
