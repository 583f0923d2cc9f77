"""Desk-scale datasets: a synthetic 10-class shape/texture set and NHWC uint8 folders."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Dataset", "synthetic_shapes", "load_folder", "CLASS_NAMES", "batches"]

CLASS_NAMES = (
    "h_stripes", "v_stripes", "diag_stripes", "anti_stripes", "checker",
    "disk", "ring", "square", "plus", "x_cross",
)


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W, C] float
    labels: np.ndarray  # [N] int
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes)


def _pattern(label: int, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, 2)
    phase = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(2.0, 4.0) * 2 * np.pi / size
    if label == 0:
        return np.sin(freq * yy + phase)
    if label == 1:
        return np.sin(freq * xx + phase)
    if label == 2:
        return np.sin(freq * (xx + yy) / np.sqrt(2) + phase)
    if label == 3:
        return np.sin(freq * (xx - yy) / np.sqrt(2) + phase)
    if label == 4:
        return np.sign(np.sin(freq * xx + phase)) * np.sign(np.sin(freq * yy + phase))
    r = np.hypot(yy - cy, xx - cx)
    radius = rng.uniform(0.18, 0.32) * size
    if label == 5:
        return np.where(r < radius, 1.0, -1.0)
    if label == 6:
        return np.where(np.abs(r - radius) < 1.0, 1.0, -1.0)
    if label == 7:
        cheb = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        return np.where(np.abs(cheb - radius) < 1.0, 1.0, -1.0)
    if label == 8:
        arm = (np.abs(yy - cy) < 1.0) | (np.abs(xx - cx) < 1.0)
        return np.where(arm & (np.maximum(np.abs(yy - cy), np.abs(xx - cx)) < radius + 2), 1.0, -1.0)
    if label == 9:
        d1, d2 = np.abs((yy - cy) - (xx - cx)), np.abs((yy - cy) + (xx - cx))
        arm = (d1 < 1.2) | (d2 < 1.2)
        return np.where(arm & (r < radius + 2), 1.0, -1.0)
    raise ValueError(f"label {label} out of range")


def synthetic_shapes(n: int, seed: int = 0, size: int = 16, noise: float = 0.5,
                     dtype=np.float32) -> Dataset:
    """Balanced, deterministic 10-class ``[n, size, size, 1]`` images.

    Each image is a randomly placed/scaled pattern with random contrast,
    offset and additive Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(CLASS_NAMES)
    rng.shuffle(labels)
    images = np.empty((n, size, size, 1), dtype=dtype)
    for i, lab in enumerate(labels):
        img = _pattern(int(lab), rng, size)
        img = rng.uniform(0.5, 1.5) * img + rng.uniform(-0.3, 0.3)
        img = img + noise * rng.normal(size=img.shape)
        images[i, :, :, 0] = img
    return Dataset(images, labels.astype(np.int64), len(CLASS_NAMES))


def load_folder(path: str | Path, eval_fraction: float = 0.2, dtype=np.float32) -> tuple[Dataset, Dataset]:
    """Read ``images.npy`` (uint8 ``[N, H, W, C]``) and ``labels.txt`` (one int per line).

    Pixels are scaled to [-1, 1]; the last ``eval_fraction`` of samples is held out.
    """
    path = Path(path)
    images = np.load(path / "images.npy")
    if images.dtype != np.uint8 or images.ndim != 4:
        raise ValueError(f"{path / 'images.npy'} must be a uint8 NHWC array, got {images.dtype} {images.shape}")
    labels = np.loadtxt(path / "labels.txt", dtype=np.int64, ndmin=1)
    if len(labels) != len(images):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    x = (images.astype(dtype) / 127.5 - 1.0).astype(dtype)
    num_classes = int(labels.max()) + 1
    n_eval = int(round(len(labels) * eval_fraction))
    cut = len(labels) - n_eval
    return (Dataset(x[:cut], labels[:cut], num_classes),
            Dataset(x[cut:], labels[cut:], num_classes))


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None):
    """Yield ``(images, labels)``; shuffled when ``rng`` is given, last partial batch dropped when shuffling."""
    n = len(ds)
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if rng is not None and n >= batch_size else n
    for start in range(0, stop, batch_size):
        sel = idx[start:start + batch_size]
        yield ds.images[sel], ds.labels[sel]
