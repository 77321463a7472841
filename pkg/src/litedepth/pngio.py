"""Minimal PNG and raw-float file I/O.

PNG support covers what the pipeline needs without an imaging dependency:
writing 8-bit RGB and 16-bit grayscale, reading non-interlaced 8/16-bit
gray/RGB(A) images with any scanline filter. The raw float format is a
one-line ASCII header "width height channels" followed by the planes as
little-endian float32.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

__all__ = ["load_image", "read_f32", "read_png", "save_image", "write_f32",
           "write_png"]

_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(kind: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + kind + payload
            + struct.pack(">I", zlib.crc32(kind + payload) & 0xFFFFFFFF))


def write_png(path: Union[str, Path], arr: np.ndarray) -> None:
    """Write uint8 gray/RGB (H,W) or (H,W,3), or uint16 gray (H,W)."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint8 and arr.ndim == 3 and arr.shape[2] == 3:
        color, depth = 2, 8
    elif arr.dtype == np.uint8 and arr.ndim == 2:
        color, depth = 0, 8
    elif arr.dtype == np.uint16 and arr.ndim == 2:
        color, depth = 0, 16
    else:
        raise ValueError(
            f"unsupported array for png: shape {arr.shape} dtype {arr.dtype}")
    h, w = arr.shape[:2]
    raw = arr.astype(">u2") if depth == 16 else arr
    rows = raw.reshape(h, -1).view(np.uint8).reshape(h, -1)
    scanlines = b"".join(b"\x00" + rows[i].tobytes() for i in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, depth, color, 0, 0, 0)
    payload = (_SIGNATURE + _chunk(b"IHDR", ihdr)
               + _chunk(b"IDAT", zlib.compress(scanlines, 6))
               + _chunk(b"IEND", b""))
    Path(path).write_bytes(payload)


def _unfilter(data: np.ndarray, h: int, stride: int, bpp: int) -> np.ndarray:
    rows = data.reshape(h, stride + 1)
    filters = rows[:, 0]
    out = rows[:, 1:].astype(np.int64)
    prev = np.zeros(stride, dtype=np.int64)
    for y in range(h):
        f, row = filters[y], out[y]
        if f == 1:      # Sub: cumulative per byte lane
            for lane in range(bpp):
                row[lane::bpp] = np.cumsum(row[lane::bpp]) % 256
        elif f == 2:    # Up
            row += prev
            row %= 256
        elif f == 3:    # Average
            for x in range(stride):
                left = row[x - bpp] if x >= bpp else 0
                row[x] = (row[x] + (left + prev[x]) // 2) % 256
        elif f == 4:    # Paeth
            for x in range(stride):
                a = row[x - bpp] if x >= bpp else 0
                b = prev[x]
                c = prev[x - bpp] if x >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
                row[x] = (row[x] + pred) % 256
        elif f != 0:
            raise ValueError(f"unknown png filter {f} on row {y}")
        prev = row
    return out.astype(np.uint8)


def read_png(path: Union[str, Path]) -> np.ndarray:
    """Read a PNG into (H, W, C) uint8 or uint16 (alpha dropped)."""
    blob = Path(path).read_bytes()
    if blob[:8] != _SIGNATURE:
        raise ValueError(f"{path}: not a png file")
    pos, idat, ihdr = 8, b"", None
    while pos < len(blob):
        (length,), kind = struct.unpack(">I", blob[pos:pos + 4]), blob[pos + 4:pos + 8]
        payload = blob[pos + 8:pos + 8 + length]
        pos += 12 + length
        if kind == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif kind == b"IDAT":
            idat += payload
        elif kind == b"IEND":
            break
    if ihdr is None:
        raise ValueError(f"{path}: missing IHDR")
    w, h, depth, color, _, _, interlace = ihdr
    if interlace:
        raise ValueError(f"{path}: interlaced png is not supported")
    channels = {0: 1, 2: 3, 4: 2, 6: 4}.get(color)
    if channels is None or depth not in (8, 16):
        raise ValueError(f"{path}: unsupported color type {color} / depth {depth}")
    bpp = channels * depth // 8
    stride = w * bpp
    raw = np.frombuffer(zlib.decompress(idat), dtype=np.uint8)
    if raw.size != h * (stride + 1):
        raise ValueError(f"{path}: truncated image data")
    pixels = _unfilter(raw.copy(), h, stride, bpp)
    if depth == 16:
        img = pixels.reshape(h, w * channels, 2).astype(np.uint16)
        img = (img[:, :, 0] << 8) | img[:, :, 1]
        img = img.reshape(h, w, channels)
    else:
        img = pixels.reshape(h, w, channels)
    if color == 4:
        img = img[:, :, :1]
    elif color == 6:
        img = img[:, :, :3]
    return img


def save_image(path: Union[str, Path], img: np.ndarray) -> None:
    """Quantize a float (3, H, W) or (H, W, 3) image in [0, 1] to 8-bit png."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 3:
        img = img.transpose(1, 2, 0)
    write_png(path, (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8))


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Read a PNG as float64 (3, H, W) in [0, 1]; grayscale is replicated."""
    img = read_png(path)
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    img = img.astype(np.float64) / scale
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return img.transpose(2, 0, 1)


def write_f32(path: Union[str, Path], arr: np.ndarray) -> None:
    """Write (H, W) or (C, H, W) float data as header + planar f32 LE."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"{w} {h} {c}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32(path: Union[str, Path]) -> np.ndarray:
    """Read the planar float format back as (C, H, W) float32."""
    blob = Path(path).read_bytes()
    nl = blob.index(b"\n")
    w, h, c = (int(v) for v in blob[:nl].split())
    data = np.frombuffer(blob[nl + 1:], dtype="<f4")
    if data.size != w * h * c:
        raise ValueError(f"{path}: expected {w * h * c} floats, found {data.size}")
    return data.reshape(c, h, w).copy()
