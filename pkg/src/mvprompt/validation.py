"""Input validation helpers.

Small checks shared by the domain types, the estimator and the CLI. They
raise :class:`~mvprompt.errors.ValidationError` so callers can map contract
violations to a single exit path.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def as_float_array(x, name: str = "array") -> np.ndarray:
    """Coerce to a float64 ndarray, rejecting ragged or non-numeric input."""
    try:
        arr = np.asarray(x, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name} is not numeric: {exc}") from exc
    return arr


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_coords(x, name: str = "coords") -> np.ndarray:
    """Validate an (N, 3) coordinate matrix with N >= 1 and finite entries."""
    arr = as_float_array(x, name)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValidationError(f"{name} must contain at least one point")
    return check_finite(arr, name)


def check_labels(y, n_classes: int | None = None, name: str = "labels") -> np.ndarray:
    """Validate a 1-D integer label vector, optionally against a class count."""
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError(f"{name} must be a non-empty 1-D sequence")
    if not np.issubdtype(arr.dtype, np.integer):
        rounded = np.asarray(arr, dtype=np.float64)
        if not np.all(rounded == np.round(rounded)):
            raise ValidationError(f"{name} must be integral class indices")
        arr = rounded.astype(np.int64)
    arr = arr.astype(np.int64)
    if arr.min() < 0:
        raise ValidationError(f"{name} contains negative class indices")
    if n_classes is not None and arr.max() >= n_classes:
        raise ValidationError(
            f"{name} contains index {arr.max()} outside [0, {n_classes})"
        )
    return arr


def check_positive(value, name: str):
    if not value > 0:
        raise ValidationError(f"{name} must be positive, got {value}")
    return value


def check_clouds(X, name: str = "X") -> list[np.ndarray]:
    """Validate a batch of point clouds.

    Accepts a (B, N, 3) array or a sequence of (N_i, 3) arrays; returns a
    list of float64 (N_i, 3) matrices.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        if X.shape[-1] != 3:
            raise ValidationError(f"{name} must have shape (B, N, 3), got {X.shape}")
        return [check_coords(X[i], f"{name}[{i}]") for i in range(X.shape[0])]
    try:
        items = list(X)
    except TypeError as exc:
        raise ValidationError(f"{name} must be an array or sequence of clouds") from exc
    if not items:
        raise ValidationError(f"{name} must contain at least one cloud")
    return [check_coords(c, f"{name}[{i}]") for i, c in enumerate(items)]
