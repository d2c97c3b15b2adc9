"""Binary file formats: AVT1 tensors, PPM (P6) images, PGM (P5) masks.

AVT1 layout: 4 magic bytes `AVT1`, u32 little-endian rank, then one u32
little-endian size per dimension, then the row-major payload as 32-bit
little-endian IEEE-754 floats. Values therefore round-trip through float32
at the file boundary.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"AVT1"


def write_avt1(path, array):
    arr = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("AVT1 payload must be finite")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_avt1(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad AVT1 magic")
    rank = struct.unpack_from("<I", blob, 4)[0]
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = 1
    for d in dims:
        count *= d
    payload = np.frombuffer(blob, dtype="<f4", count=count, offset=8 + 4 * rank)
    if payload.size != count:
        raise ValueError(f"{path}: truncated AVT1 payload")
    arr = payload.astype(np.float64).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: non-finite values in AVT1 payload")
    return arr


def _read_netpbm_header(blob, magic):
    if not blob.startswith(magic):
        raise ValueError(f"expected {magic.decode()} header")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    return fields[0], fields[1], fields[2], pos + 1


def write_ppm(path, image):
    """image: (H, W, 3) floats in [0, 1], quantized to 8 bits."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"write_ppm: need (H, W, 3), got {arr.shape}")
    pixels = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes(order="C"))


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    width, height, maxval, offset = _read_netpbm_header(blob, b"P6")
    data = np.frombuffer(blob, dtype=np.uint8, count=height * width * 3, offset=offset)
    return data.reshape(height, width, 3).astype(np.float64) / maxval


def write_pgm(path, values):
    """values: (H, W) uint8-compatible integers (masks use 0/255, labels 0..count-1)."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm: need (H, W), got {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("write_pgm: values outside [0, 255]")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.astype(np.uint8).tobytes(order="C"))


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    width, height, _, offset = _read_netpbm_header(blob, b"P5")
    data = np.frombuffer(blob, dtype=np.uint8, count=height * width, offset=offset)
    return data.reshape(height, width).copy()
