import numbers
import warnings

import numpy as np

from .errors import DomainError, FlagWarning, ShapeError


def as_generator(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.RandomState):
        return np.random.default_rng(seed.randint(0, 2**31 - 1))
    return np.random.default_rng(seed)


def check_positive(value, name, strict=True):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise DomainError(f"{name} must be a finite real number, got {value!r}")
    if strict and value <= 0:
        raise DomainError(f"{name} must be > 0, got {value!r}")
    if not strict and value < 0:
        raise DomainError(f"{name} must be >= 0, got {value!r}")
    return float(value)


def check_int(value, name, minimum=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise DomainError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise DomainError(f"{name} must be >= {minimum}, got {value!r}")
    return int(value)


def check_dims(d, n):
    d = check_int(d, "d", 1)
    n = check_int(n, "n", 1)
    if d > n:
        raise DomainError(f"need 1 <= d <= n, got d={d}, n={n}")
    return d, n


def check_vector(x, n=None, name="x"):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError(f"{name} must be a 1-D vector, got shape {x.shape}")
    if n is not None and x.shape[0] != n:
        raise ShapeError(f"{name} has length {x.shape[0]}, expected {n}")
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} has non-finite entries")
    return x


def check_points(x, n, name="x"):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != n:
        raise ShapeError(f"{name} must have shape (k, {n}), got {x.shape}")
    return x


def unit_vector(xi, n=None, name="xi"):
    xi = check_vector(xi, n, name)
    norm = np.linalg.norm(xi)
    if norm == 0:
        raise DomainError(f"{name} must be nonzero")
    if abs(norm - 1.0) > 1e-12:
        warnings.warn(f"{name} was not a unit vector (norm {norm:.6g}); normalized", FlagWarning, stacklevel=3)
        return xi / norm, True
    return xi / norm, False
