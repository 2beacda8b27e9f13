"""MNIST IDX loading, global normalization and synthetic fixtures."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

__all__ = [
    "FormatError",
    "Dataset",
    "read_idx",
    "load_mnist_idx",
    "load_mnist",
    "synthetic_blobs",
    "MNIST_FILES",
]

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class FormatError(ValueError):
    """Malformed IDX file; the message names the file and byte offset."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, 1, 28, 28) float64
    labels: np.ndarray  # (N,) int64
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        """First ``index`` samples for an int, else the samples at ``index``."""
        if isinstance(index, (int, np.integer)):
            index = slice(0, int(index))
        return Dataset(self.images[index], self.labels[index], self.mean, self.std)


def _open(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX file into a uint8 array of its declared shape."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(
            f"{path}: truncated data at offset {len(raw)}, expected {header + size} bytes"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, stats: Optional[Tuple[float, float]] = None) -> Dataset:
    """Load one MNIST split.

    Pixels are scaled to [0, 1] and standardized with a single global mean
    and std. Pass the training split's ``(mean, std)`` as ``stats`` when
    loading the test split; without it the file's own statistics are used.
    """
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected a 3-D image array, got {images.ndim}-D")
    if len(images) != len(labels):
        raise FormatError(f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise FormatError(f"{labels_path}: label {labels.max()} outside [0, 9]")
    x = images.astype(np.float64) / 255.0
    if stats is None:
        mean = float(x.mean())
        std = float(x.std())
    else:
        mean, std = map(float, stats)
    x -= mean
    x /= std
    return Dataset(x[:, None, :, :], labels.astype(np.int64), mean, std)


def load_mnist(directory) -> Tuple[Dataset, Dataset]:
    """Train and test splits from a directory holding the four standard files.

    Gzipped copies (``*.gz``) are accepted. The test split is normalized
    with training statistics.
    """
    directory = Path(directory)

    def find(name):
        for candidate in (directory / name, directory / (name + ".gz")):
            if candidate.exists():
                return candidate
        raise FileNotFoundError(f"MNIST file {name} not found in {directory}")

    train = load_mnist_idx(*(find(n) for n in MNIST_FILES["train"]))
    test = load_mnist_idx(*(find(n) for n in MNIST_FILES["test"]), stats=(train.mean, train.std))
    return train, test


def synthetic_blobs(n: int, classes: int = 10, seed: int = 0, separation: float = 6.0,
                    shape=(1, 28, 28)) -> Dataset:
    """Gaussian blobs shaped like MNIST images.

    Each class center is a random direction of length ``separation``;
    samples are the center plus standard normal noise in every pixel.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if classes < 1:
        raise ValueError("classes must be positive")
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    centers = rng.standard_normal((classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = rng.integers(0, classes, size=n)
    x = centers[labels] + rng.standard_normal((n, dim))
    return Dataset(x.reshape((n,) + tuple(shape)), labels.astype(np.int64))
