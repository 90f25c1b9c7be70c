"""Input validation helpers shared by the estimators and functional cores."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class DimensionMismatchError(ValidationError):
    """Raised when two arrays disagree on a shared dimension."""


def as_matrix(X, name: str = "X", *, min_rows: int = 1) -> np.ndarray:
    """Return ``X`` as a finite 2-D float64 array, raising ValidationError otherwise."""
    if (
        isinstance(X, np.ndarray)
        and X.dtype == np.float64
        and X.ndim == 2
        and X.shape[0] >= min_rows
        and X.shape[1] >= 1
        and np.isfinite(X).all()
    ):
        return X
    try:
        arr = check_array(
            X,
            dtype=np.float64,
            ensure_2d=True,
            ensure_min_samples=min_rows,
            ensure_all_finite=True,
        )
    except ValueError as exc:
        raise ValidationError(f"{name}: {exc}") from exc
    return arr


def as_labels(y, n: int | None = None, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValidationError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValidationError("labels must be integers")
    y = y.astype(np.int64)
    if n is not None and y.shape[0] != n:
        raise DimensionMismatchError(f"expected {n} labels, got {y.shape[0]}")
    if num_classes is not None and y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    return y


def check_same_columns(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(
            f"{what}: column counts differ ({a.shape[1]} vs {b.shape[1]})"
        )
