"""Small argument checks in the spirit of ``sklearn.utils.validation``."""

import math

import numpy as np

from udskernel.exceptions import InputError


def check_points(X, ambient_dim=None) -> np.ndarray:
    """Return ``X`` as a finite 2-D float array; zero rows are allowed."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if ambient_dim in (None, 1) else X.reshape(-1, ambient_dim)
    if X.ndim != 2:
        raise InputError(f"expected a 2-D array of points, got shape {X.shape}")
    if ambient_dim is not None and X.shape[1] != ambient_dim:
        raise InputError(f"expected {ambient_dim} coordinates, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise InputError("points contain non-finite entries")
    return X


def check_positive(value, name: str) -> float:
    if value is None or not math.isfinite(value) or value <= 0:
        raise InputError(f"{name} must be a finite number > 0, got {value}")
    return float(value)


def check_delta(delta, allow_one: bool = False) -> float:
    upper_ok = delta <= 1 if allow_one else delta < 1
    if not (delta > 0 and upper_ok):
        bound = "(0, 1]" if allow_one else "(0, 1)"
        raise InputError(f"delta must lie in {bound}, got {delta}")
    return float(delta)
