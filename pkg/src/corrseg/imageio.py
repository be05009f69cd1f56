"""Binary PGM (P5) and PPM (P6) writers/readers, 8-bit."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Floats in [0, 1] are scaled to 0..255; integer arrays pass through."""
    img = np.asarray(img)
    if np.issubdtype(img.dtype, np.floating):
        return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return np.clip(img, 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    img = to_uint8(img)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Write a ``[3, H, W]`` (or ``[H, W, 3]``) image."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[2] != 3:
        img = np.transpose(img, (1, 2, 0))
    img = to_uint8(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an RGB image")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a binary P5/P6 file written by this module; returns ``[H, W]`` or ``[H, W, 3]`` uint8."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit files are supported")
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise ValueError(f"not a binary PGM/PPM: {magic!r}")
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=pos)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def minmax_gray(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes mid-gray (128)."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
