"""Small input-validation helpers used by the estimators and the functional core."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch


def as_matrix(x, name="X", *, dtype=np.float64) -> np.ndarray:
    """Coerce to a 2-D float64 array with finite entries."""
    a = np.asarray(x, dtype=dtype)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size and not np.isfinite(a).all():
        raise ValueError(f"{name} contains NaN or Inf entries")
    return a


def as_vector(x, name="x", *, dtype=np.float64) -> np.ndarray:
    a = np.asarray(x, dtype=dtype)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    if a.size and not np.isfinite(a).all():
        raise ValueError(f"{name} contains NaN or Inf entries")
    return a


def check_same_dim(a, b, name_a="A", name_b="B"):
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(
            f"{name_a} has {a.shape[1]} columns but {name_b} has {b.shape[1]}"
        )


def check_square(a, name="A") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    return a


def check_symmetric(a, name="A", rtol=1e-12) -> np.ndarray:
    """Validate symmetry to relative tolerance and return the symmetrized matrix."""
    a = check_square(a, name)
    scale = np.abs(a).max() if a.size else 0.0
    if scale and np.abs(a - a.T).max() > rtol * max(scale, 1e-300) * a.shape[0]:
        raise ValueError(f"{name} is not symmetric within {rtol:g} relative")
    return 0.5 * (a + a.T)
