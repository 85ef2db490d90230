"""Binary PPM (P6, 8-bit RGB) and PGM (P5, 8/16-bit gray) read/write."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"PPM needs an (H, W, 3) uint8 array, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def write_pgm16(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint16:
        raise ValueError(f"16-bit PGM needs an (H, W) uint16 array, got {img.shape} {img.dtype}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + img.astype(">u2").tobytes())


def _header(data: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    """Parse magic, width, height, maxval; returns them with the raster offset."""
    if data[:2] != magic:
        raise NetpbmError(f"{path}: byte 0: expected magic {magic.decode()}, got {data[:2]!r}")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise NetpbmError(f"{path}: byte {start}: truncated header")
        tok = data[start:pos]
        if not tok.isdigit():
            raise NetpbmError(f"{path}: byte {start}: bad header token {tok!r}")
        tokens.append(int(tok))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise NetpbmError(f"{path}: byte {pos}: missing whitespace before raster")
    w, h, maxval = tokens
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise NetpbmError(f"{path}: invalid header values width={w} height={h} maxval={maxval}")
    return w, h, maxval, pos + 1


def _raster(data: bytes, offset: int, nbytes: int, path) -> bytes:
    end = offset + nbytes
    if len(data) < end:
        raise NetpbmError(f"{path}: truncated raster at byte offset {len(data)}, expected {end} bytes")
    return data[offset:end]


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, maxval, off = _header(data, b"P6", path)
    if maxval > 255:
        raise NetpbmError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    raw = _raster(data, off, w * h * 3, path)
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path: str | Path) -> np.ndarray:
    """Gray PGM; 16-bit files are big-endian and come back as uint16."""
    data = Path(path).read_bytes()
    w, h, maxval, off = _header(data, b"P5", path)
    if maxval < 256:
        raw = _raster(data, off, w * h, path)
        return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
    raw = _raster(data, off, w * h * 2, path)
    return np.frombuffer(raw, dtype=">u2").reshape(h, w).astype(np.uint16)
