"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numbers

import numpy as np

from .exceptions import DomainError


def check_nonnegative(value, name):
    if not np.isfinite(value) or value < 0:
        raise DomainError(f"{name} must be a finite nonnegative number, got {value!r}")
    return float(value)


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise DomainError(f"{name} must be a finite positive number, got {value!r}")
    return float(value)


def check_int(value, name, minimum=None):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool):
        raise DomainError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise DomainError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_1d(values, name, min_length=1, finite=True):
    """Return ``values`` as a contiguous float64 vector."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim == 2 and 1 in arr.shape:
        arr = arr.ravel()
    if arr.ndim != 1:
        raise DomainError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size < min_length:
        raise DomainError(f"{name} needs at least {min_length} entries, got {arr.size}")
    if finite and not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def check_increasing(arr, name, strict=True):
    d = np.diff(arr)
    if np.any(d <= 0 if strict else d < 0):
        raise DomainError(f"{name} must be {'strictly ' if strict else ''}increasing")
    return arr


def check_random_state(seed):
    """Turn ``seed`` into a PCG64-backed ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.Generator(np.random.PCG64())
    if isinstance(seed, numbers.Integral):
        if seed < 0 or seed >= 2**64:
            raise DomainError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        return np.random.Generator(np.random.PCG64(int(seed)))
    raise DomainError(f"cannot build a random generator from {seed!r}")
