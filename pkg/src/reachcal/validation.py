"""Input validation helpers shared by the estimators and library functions."""

import numpy as np

from .errors import ConfigurationError, NumericError


def as_states(X, n_dims=None, name="X"):
    """Coerce ``X`` to a finite float64 array of shape (m, n).

    A single n-vector is promoted to shape (1, n).
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a state vector or (m, n) array, got ndim={arr.ndim}")
    if n_dims is not None and arr.shape[1] != n_dims:
        raise ValueError(f"{name} has {arr.shape[1]} dimensions, expected {n_dims}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def as_trajectories(X, name="X"):
    """Coerce ``X`` to a finite (N, K, n) float array."""
    arr = np.asarray(X)
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (N, K, n), got ndim={arr.ndim}")
    if min(arr.shape) < 1:
        raise ValueError(f"{name} has an empty axis: shape={arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def check_step(k, n_steps, name="k"):
    k = int(k)
    if not 0 <= k < n_steps:
        raise ValueError(f"{name}={k} out of range [0, {n_steps})")
    return k


def check_box(box, name="box"):
    """Validate an axis-aligned box given as an (n, 2) array of (lower, upper)."""
    arr = np.asarray(box, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ConfigurationError(f"{name} must have shape (n, 2)")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} has non-finite bounds")
    if not np.all(arr[:, 0] < arr[:, 1]):
        raise ConfigurationError(f"{name} needs lower < upper on every axis")
    return arr


def check_fitted(estimator, attribute):
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
