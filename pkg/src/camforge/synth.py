"""Synthetic multi-label shapes dataset with pixel-level ground truth.

Each foreground class is a shape type drawn in a class-tinted colour over a
low-amplitude textured background. Later shapes paint over earlier ones, and
labels are read off the final mask so the multi-hot vector always agrees with
the pixels.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from camforge.imaging import read_pgm, resize_bilinear, resize_nearest, write_pgm
from camforge.tensor import SnapshotError, load_tensor, save_tensor

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")

_BASE_COLOURS = np.array([
    [0.90, 0.25, 0.20],
    [0.20, 0.75, 0.30],
    [0.25, 0.35, 0.90],
    [0.90, 0.80, 0.20],
    [0.80, 0.30, 0.85],
    [0.20, 0.80, 0.85],
])


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray   # (3, S, S), values in [0, 1]
    labels: np.ndarray  # (C,) multi-hot, int64
    mask: np.ndarray    # (S, S) int64, 0 = background, s = class s


def labels_from_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    present = np.zeros(num_classes, dtype=np.int64)
    ids = np.unique(mask)
    present[ids[ids > 0] - 1] = 1
    return present


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        # apex up, base at cy + r
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {kind}")


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(3, max(2, size // 8), max(2, size // 8)))
    smooth = resize_bilinear(coarse, size)
    fine = rng.uniform(-1.0, 1.0, size=(3, size, size))
    base = rng.uniform(0.35, 0.55)
    return base + 0.08 * smooth + 0.04 * fine


def make_sample(rng: np.random.Generator, num_classes: int, size: int) -> Sample:
    image = _texture(rng, size)
    mask = np.zeros((size, size), dtype=np.int64)
    count = int(rng.integers(1, 4))
    for _ in range(count):
        cls = int(rng.integers(num_classes))
        r = rng.uniform(0.14, 0.24) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        region = _shape_mask(SHAPES[cls], size, cy, cx, r)
        colour = np.clip(_BASE_COLOURS[cls] + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
        image[:, region] = colour[:, None]
        mask[region] = cls + 1
    image = np.clip(image, 0.0, 1.0)
    return Sample(image, labels_from_mask(mask, num_classes), mask)


def generate(seed: int, count: int, num_classes: int = 3, size: int = 64) -> list[Sample]:
    """Sample ``i`` is drawn from its own stream seeded by (seed, i)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 2 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must be in [2, {len(SHAPES)}], got {num_classes}")
    if size < 8:
        raise ValueError("image size must be >= 8")
    return [make_sample(np.random.default_rng([seed, i]), num_classes, size) for i in range(count)]


def bundled_dataset(count: int = 200, num_classes: int = 3, size: int = 64, seed: int = 2024) -> list[Sample]:
    """The reference training set: fixed seed, 200 samples, 3 classes, 64 px."""
    return generate(seed, count, num_classes, size)


def _fit(x: np.ndarray, size: int, fill) -> np.ndarray:
    h = x.shape[-1]
    if h >= size:
        off = (h - size) // 2
        return x[..., off:off + size, off:off + size]
    out = np.full(x.shape[:-2] + (size, size), fill, dtype=x.dtype)
    off = (size - h) // 2
    out[..., off:off + h, off:off + h] = x
    return out


def augment(sample: Sample, rng: np.random.Generator, scale: float | None = None) -> Sample:
    """Random rescale in [0.75, 1.25] then centre crop or pad back to size."""
    size = sample.image.shape[-1]
    if scale is None:
        scale = float(rng.uniform(0.75, 1.25))
    new = max(1, int(round(size * scale)))
    if new == size:
        return Sample(sample.image.copy(), sample.labels.copy(), sample.mask.copy())
    image = resize_bilinear(sample.image, new)
    mask = resize_nearest(sample.mask, new)
    image = _fit(image, size, sample.image.mean(axis=(1, 2))[:, None, None])
    mask = _fit(mask, size, 0)
    return Sample(image, labels_from_mask(mask, sample.labels.size), mask)


def save(dataset: list[Sample], directory) -> None:
    """Manifest lines are ``index,image_file,mask_file,labels-bitstring``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(dataset):
        img_name, mask_name = f"image_{i:05d}.cftn", f"mask_{i:05d}.pgm"
        save_tensor(directory / img_name, s.image)
        write_pgm(directory / mask_name, s.mask)
        bits = "".join(str(int(b)) for b in s.labels)
        lines.append(f"{i},{img_name},{mask_name},{bits}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load(directory) -> list[Sample]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not directory.is_dir():
        raise DatasetError(f"dataset directory not found: {directory}")
    if not manifest.is_file():
        raise DatasetError(f"dataset manifest not found: {manifest}")
    samples = []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.strip().split(",")
        if len(parts) != 4 or not parts[0].isdigit() or set(parts[3]) - {"0", "1"}:
            raise DatasetError(f"{manifest}:{lineno}: malformed entry {raw!r}")
        idx, img_name, mask_name, bits = parts
        if int(idx) != len(samples):
            raise DatasetError(f"{manifest}:{lineno}: expected index {len(samples)}, got {idx}")
        try:
            image = load_tensor(directory / img_name).data.copy()
        except SnapshotError as exc:
            raise DatasetError(str(exc)) from exc
        try:
            mask = read_pgm(directory / mask_name).astype(np.int64)
        except ValueError as exc:
            raise DatasetError(str(exc)) from exc
        labels = np.array([int(b) for b in bits], dtype=np.int64)
        if image.ndim != 3 or image.shape[0] != 3 or image.shape[1:] != mask.shape:
            raise DatasetError(f"{directory / img_name}: image {image.shape} does not match mask {mask.shape}")
        if mask.max() > labels.size or not np.array_equal(labels, labels_from_mask(mask, labels.size)):
            raise DatasetError(f"{directory / mask_name}: mask classes disagree with labels {bits}")
        samples.append(Sample(image, labels, mask))
    if not samples:
        raise DatasetError(f"{manifest}: no entries")
    return samples
