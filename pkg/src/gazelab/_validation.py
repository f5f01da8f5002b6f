"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_images(X, allow_single: bool = True) -> np.ndarray:
    """Return ``X`` as a float64 (n, C, H, W) array of finite values in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3 and allow_single:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("expected at least one image")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    if X.min() < -1e-6 or X.max() > 1.0 + 1e-6:
        raise ValueError(f"image values must lie in [0, 1], got [{X.min():.3g}, {X.max():.3g}]")
    return X


def check_gaze(y, n: int | None = None) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValueError(f"gaze labels must be shaped (n, 2) as (mu, phi), got {y.shape}")
    if n is not None and len(y) != n:
        raise ValueError(f"got {len(y)} gaze labels for {n} images")
    return y
