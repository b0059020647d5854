"""Input validation helpers shared by the estimator and CLI layers."""

import numpy as np

from .errors import DimensionError, InputError


def check_images(X, channels: int | None = None) -> np.ndarray:
    """Coerce to float64 (N,C,H,W) and reject non-finite values."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise DimensionError(f"expected images of shape (N,C,H,W), got {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise DimensionError(f"expected {channels} channels, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise InputError("images contain non-finite values")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise DimensionError(f"expected {n_samples} labels, got shape {y.shape}")
    return y
