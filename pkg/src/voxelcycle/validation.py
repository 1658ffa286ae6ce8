"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import LabelError, NumericError, ShapeError


def check_volume_array(X, name: str = "X", min_extent: int = 16) -> np.ndarray:
    """Coerce to a float64 stack of volumes with network-compatible dims.

    Accepts (n, D, H, W) arrays or sequences of (D, H, W) volumes; values
    must be finite and normalized to [-1, 1].
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be (n, D, H, W) volumes, got shape {arr.shape}")
    for axis, size in zip("DHW", arr.shape[1:]):
        if size % 8 != 0:
            raise ShapeError(f"{name}: axis {axis} extent {size} is not divisible by 8")
        if size < min_extent:
            raise ShapeError(f"{name}: axis {axis} extent {size} is below {min_extent}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    if arr.min() < -1.0 or arr.max() > 1.0:
        raise ShapeError(f"{name} must be normalized to [-1, 1]; found range "
                         f"[{arr.min():.3f}, {arr.max():.3f}]")
    return arr


def check_label_array(y, class_count: int, volumes: np.ndarray,
                      name: str = "y") -> np.ndarray:
    """Integer labels matching the volume stack's grid, one map per volume."""
    arr = np.asarray(y)
    if arr.ndim == 3:
        arr = arr[None]
    if not np.issubdtype(arr.dtype, np.integer):
        raise LabelError(f"{name} must hold integer class ids, got dtype {arr.dtype}")
    if arr.shape != volumes.shape:
        raise ShapeError(f"{name} shape {arr.shape} does not match volumes "
                         f"{volumes.shape}")
    if arr.min() < 0 or arr.max() >= class_count:
        raise LabelError(f"{name} must lie in [0, {class_count}), found "
                         f"[{arr.min()}, {arr.max()}]")
    return arr.astype(np.int64, copy=False)


def check_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise ShapeError(f"{type(estimator).__name__} is not fitted yet; "
                         "call fit() first")
