"""Input validation helpers shared by the estimator-facing modules."""

from __future__ import annotations

import numpy as np

SIMPLEX_ATOL = 1e-6


def check_image(image, name: str = "image") -> np.ndarray:
    """Return ``image`` as a float64 H x W x 3 array with values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_images(images, name: str = "images") -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"{name} must have shape (n, H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch between {what}: {a.shape} vs {b.shape}")


def check_simplex(p, name: str = "alpha", atol: float = SIMPLEX_ATOL) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < -atol or abs(arr.sum() - 1.0) > atol:
        raise ValueError(f"{name} is not on the probability simplex (sum={arr.sum():.12g})")
    return arr


def check_finite(x, name: str = "input") -> None:
    if not np.all(np.isfinite(np.asarray(x, dtype=np.float64))):
        raise ValueError(f"{name} contains non-finite values")


def check_binary_labels(y, name: str = "labels") -> np.ndarray:
    arr = np.asarray(y)
    if not np.all(np.isin(arr, (0, 1))):
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(np.int64)
