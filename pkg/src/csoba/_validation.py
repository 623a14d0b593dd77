"""Small input-checking helpers shared by every module."""

import numbers

import numpy as np

from .exceptions import InputError, InvalidSpecError


def check_vector(x, dim=None, name="x"):
    """Return ``x`` as a finite 1-D float64 array, optionally of length ``dim``."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise InputError(f"{name} has length {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite entries")
    return arr


def check_batch(X, dim=None, name="X"):
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"{name} must be 2-D, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise InputError(f"{name} has {arr.shape[1]} columns, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite entries")
    return arr


def check_positive_int(value, name, minimum=1, error=InvalidSpecError):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise error(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise error(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_positive_float(value, name, upper=None, inclusive_upper=True, error=InvalidSpecError):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise error(f"{name} must be a real number, got {value!r}")
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise error(f"{name} must be positive and finite, got {value}")
    if upper is not None:
        if value > upper or (not inclusive_upper and value == upper):
            raise error(f"{name} must be <= {upper}, got {value}")
    return value
