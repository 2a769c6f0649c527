"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, channels: int = 3) -> np.ndarray:
    """Raw images ``(N, H, W, C)`` with values in [0, 255]."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=None, ensure_all_finite=True,
                    input_name="X")
    if X.ndim != 4 or X.shape[-1] != channels:
        raise ValueError(f"expected images of shape (n, height, width, {channels}), got {X.shape}")
    if X.dtype.kind not in "uif":
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    if X.size and (X.min() < 0 or X.max() > 255):
        raise ValueError("image values must lie in [0, 255]")
    return X


def check_regions(regions, images: np.ndarray) -> np.ndarray:
    """Integer label grids matching the image grids; 0 marks background."""
    regions = check_array(regions, allow_nd=True, ensure_2d=False, dtype=None, input_name="regions")
    if regions.shape != images.shape[:3]:
        raise ValueError(f"regions shape {regions.shape} does not match images {images.shape[:3]}")
    if regions.dtype.kind == "f":
        if not np.all(regions == np.round(regions)):
            raise ValueError("region labels must be integers")
    elif regions.dtype.kind not in "iu":
        raise ValueError("region labels must be integers")
    regions = regions.astype(np.int32)
    if regions.size and regions.min() < 0:
        raise ValueError("region labels must be non-negative")
    return regions


def check_aggregates(y, regions: np.ndarray) -> np.ndarray:
    """Non-negative region totals ``(N, n_regions)`` covering every label used."""
    y = check_array(y, ensure_2d=True, dtype=np.float64, input_name="y")
    if len(y) != len(regions):
        raise ValueError(f"got {len(y)} label rows for {len(regions)} images")
    if regions.size and regions.max() > y.shape[1]:
        raise ValueError(f"region label {regions.max()} has no column in y (n_regions={y.shape[1]})")
    if np.any(y < 0):
        raise ValueError("aggregate labels must be non-negative")
    return y
