"""Input validation helpers shared by the kernels, blocks and estimators."""

from __future__ import annotations

import numpy as np


def check_tensor4(x, name: str = "x", allow_empty: bool = True) -> np.ndarray:
    """Return ``x`` as a float64 NCHW array, raising ``ValueError`` if it cannot be one."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be 4-D (n, c, h, w), got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_labels(y, n: int, n_classes: int = 10) -> np.ndarray:
    labels = np.asarray(y)
    if labels.ndim != 1 or labels.shape[0] != n:
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    return labels


def check_X_y(X, y, n_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    X = check_tensor4(X, "X", allow_empty=False)
    return X, check_labels(y, X.shape[0], n_classes)


def check_positive(value, name: str, allow_zero: bool = False):
    if allow_zero:
        if not value >= 0:
            raise ValueError(f"{name} must be >= 0, got {value}")
    elif not value > 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    return value
