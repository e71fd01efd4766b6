"""Binary PGM (P5) masks and PPM (P6) heatmap images."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError


def _pnm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # a single whitespace byte ends the header


def read_pgm(path) -> np.ndarray:
    """Read a P5 file as a 0/1 mask (any non-zero sample counts as foreground)."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), start = _pnm_tokens(data, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(w), int(h), int(maxval)
    width = 1 if maxval < 256 else 2
    body = data[start:start + w * h * width]
    if len(body) < w * h * width:
        raise ValueError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8 if width == 1 else ">u2").reshape(h, w)
    return (pixels > 0).astype(np.uint8)


def write_pgm(path, mask) -> None:
    mask = np.asarray(mask)
    h, w = mask.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + (np.where(mask > 0, 255, 0).astype(np.uint8)).tobytes())


def heatmap_pixels(scores: Sequence[float], height: int, width: int) -> np.ndarray:
    """Min-max normalize per-token scores onto a red ramp, row-major, as an [H x W x 3] uint8 array."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size != height * width:
        raise DimensionError(f"grid {height}x{width} does not hold {scores.size} tokens")
    lo, hi = scores.min(), scores.max()
    level = np.zeros_like(scores) if hi == lo else (scores - lo) / (hi - lo)
    img = np.zeros((height, width, 3), dtype=np.uint8)
    img[..., 0] = np.rint(255 * level).astype(np.uint8).reshape(height, width)
    return img


def write_ppm(path, pixels: np.ndarray) -> None:
    h, w, _ = pixels.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.astype(np.uint8).tobytes())
