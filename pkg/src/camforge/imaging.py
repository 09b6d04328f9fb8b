"""Resizing and 8-bit PGM I/O for masks and heatmaps."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    # half-pixel centres; same-size resize is the identity matrix exactly
    mat = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = np.arange(dst)
    mat[rows, lo] += 1.0 - frac
    mat[rows, hi] += frac
    return mat


def resize_bilinear(x: np.ndarray, size: tuple[int, int] | int) -> np.ndarray:
    """Bilinear resize of the two trailing axes."""
    x = np.asarray(x, dtype=np.float64)
    h, w = (size, size) if isinstance(size, int) else size
    if x.shape[-2:] == (h, w):
        return x.copy()
    rh = _bilinear_matrix(x.shape[-2], h)
    rw = _bilinear_matrix(x.shape[-1], w)
    return rh @ x @ rw.T


def resize_nearest(x: np.ndarray, size: tuple[int, int] | int) -> np.ndarray:
    x = np.asarray(x)
    h, w = (size, size) if isinstance(size, int) else size
    src_h, src_w = x.shape[-2:]
    ri = np.minimum(((np.arange(h) + 0.5) * src_h / h).astype(int), src_h - 1)
    ci = np.minimum(((np.arange(w) + 0.5) * src_w / w).astype(int), src_w - 1)
    return x[..., ri[:, None], ci[None, :]]


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    if img.size and (img.min() < 0 or img.max() > 255):
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ValueError(f"{path}: cannot read ({exc.strerror})") from exc
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(buf[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(v) for v in fields[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    data = buf[pos:]
    if len(data) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def to_heatmap(x: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 uint8; a constant matrix maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.uint8)
    return np.round(255.0 * (x - lo) / (hi - lo)).astype(np.uint8)
