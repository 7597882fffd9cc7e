"""CIFAR-10 binary ingestion, seeded subset sampling and a synthetic stand-in dataset."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Prng, random_normal

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
N_CLASSES = 10


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, 3, h, w), values in [0, 1]
    labels: np.ndarray  # (n,) int64 in [0, 9]
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {self.images.shape}")
        if self.images.shape[0] != len(self.labels):
            raise ValueError(f"{self.images.shape[0]} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise ValueError("labels must lie in [0, 9]")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.name if name is None else name)


def parse_cifar10(blob: bytes, name: str = "cifar10") -> Dataset:
    if len(blob) % RECORD_BYTES:
        raise ValueError(
            f"{name}: length {len(blob)} is not a multiple of the {RECORD_BYTES}-byte record size"
        )
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{name}: record {bad} has label byte {labels[bad]} > 9")
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float64) / 255.0
    return Dataset(images, labels, name)


def load_cifar10(paths) -> Dataset:
    """Load and concatenate CIFAR-10 binary batch files (``data_batch_*.bin``, ``test_batch.bin``)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    parts = [parse_cifar10(Path(p).read_bytes(), Path(p).name) for p in paths]
    if not parts:
        raise ValueError("no CIFAR-10 files given")
    name = "+".join(p.name for p in parts)
    return Dataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        f"cifar10:{name}",
    )


def to_cifar10_bytes(d: Dataset) -> bytes:
    """Encode a 3x32x32 dataset in the CIFAR-10 record format (pixels rounded to bytes)."""
    if d.images.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"CIFAR-10 records hold {IMAGE_SHAPE} images, got {d.images.shape[1:]}")
    n = len(d)
    records = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = d.labels
    records[:, 1:] = np.rint(d.images.reshape(n, -1) * 255.0).astype(np.uint8)
    return records.tobytes()


def write_cifar10(path, d: Dataset) -> None:
    Path(path).write_bytes(to_cifar10_bytes(d))


def shuffled_indices(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates permutation of ``range(n)`` driven by ``Prng(seed)``."""
    prng = Prng(seed)
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(prng.next_float() * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return np.asarray(perm, dtype=np.int64)


def sample_split(d: Dataset, n_train: int, n_eval: int, seed: int) -> tuple[Dataset, Dataset]:
    if n_train < 0 or n_eval < 0:
        raise ValueError("split sizes must be non-negative")
    if n_train + n_eval > len(d):
        raise ValueError(f"need {n_train} + {n_eval} samples but dataset has {len(d)}")
    perm = shuffled_indices(len(d), seed)
    train = d.subset(perm[:n_train], f"{d.name}[train]")
    held_out = d.subset(perm[n_train : n_train + n_eval], f"{d.name}[eval]")
    return train, held_out


def synthetic_dataset(
    n: int,
    classes: int = 10,
    h: int = 16,
    w: int = 16,
    noise: float = 0.1,
    seed: int = 0,
) -> Dataset:
    """Sinusoidal-stripe images; class ``k`` has frequency ``k + 1`` along the diagonal.

    Labels cycle ``0, 1, ..., classes - 1``.  Gaussian pixel noise comes from
    ``Prng(seed)`` and values are clipped to [0, 1].
    """
    if not 1 <= classes <= N_CLASSES:
        raise ValueError(f"classes must be in [1, {N_CLASSES}], got {classes}")
    if n < classes:
        raise ValueError(f"n={n} must be >= classes={classes}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    labels = np.arange(n, dtype=np.int64) % classes
    ch, yy, xx = np.meshgrid(np.arange(3), np.arange(h), np.arange(w), indexing="ij")
    phase = (xx + yy + ch) / (h + w)
    patterns = np.stack([0.5 + 0.5 * np.sin(2.0 * math.pi * (k + 1) * phase) for k in range(classes)])
    images = patterns[labels]
    if noise > 0:
        images = images + random_normal(Prng(seed), images.shape, 0.0, noise)
    return Dataset(np.clip(images, 0.0, 1.0), labels, f"synthetic(n={n},h={h},w={w},noise={noise},seed={seed})")
