"""Minimal binary PGM (P5, 8-bit) reader/writer and heatmap emitter."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def write_pgm(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise DataError(f"PGM image must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise DataError("PGM payload must fit 0..255")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    payload = raw[pos : pos + width * height]
    if len(payload) != width * height:
        raise DataError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width)


def write_heatmap(path, values: np.ndarray) -> None:
    """Linear per-file scaling with the maximum mapped to 255."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"heatmap values must be 2-D, got shape {arr.shape}")
    peak = arr.max() if arr.size else 0.0
    if peak > 0:
        scaled = np.rint(arr * (255.0 / peak))
    else:
        scaled = np.zeros_like(arr)
    write_pgm(path, np.clip(scaled, 0, 255).astype(np.uint8))
