"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np


def check_image(img, name="image", min_size=1):
    """Return ``img`` as a C-contiguous float64 2-D array with values in [0, 1].

    Raises
    ------
    ValueError
        If the array is not 2-D, contains non-finite values, falls outside
        [0, 1], or is smaller than ``min_size`` along either axis.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if arr.shape[0] < min_size or arr.shape[1] < min_size:
        raise ValueError(f"{name} must be at least {min_size}x{min_size}, got {arr.shape[1]}x{arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.ascontiguousarray(arr)


def check_same_shape(a, b, names=("fixed", "moving")):
    if a.shape != b.shape:
        raise ValueError(f"{names[0]} and {names[1]} must have the same shape, got {a.shape} and {b.shape}")


def check_points(points, name="points"):
    """Return an (N, 2) float64 array of finite (x, y) coordinates."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 2))
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must have shape (N, 2), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def check_odd_window(w):
    if int(w) != w or w < 1 or w % 2 == 0:
        raise ValueError(f"window size must be a positive odd integer, got {w}")
    return int(w)
