"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ConfigError
from .profile import ServiceProfile, load_profile


def check_profile(profile) -> ServiceProfile:
    """Accept a :class:`ServiceProfile`, a dict, a JSON path or a bundled profile name."""
    return load_profile(profile)


def check_positive(value, name: str, strict: bool = True) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ConfigError(f"{name} must be a finite number, got {value!r}")
    if value < 0 or (strict and value == 0):
        raise ConfigError(f"{name} must be {'>' if strict else '>='} 0, got {value!r}")
    return float(value)


def check_int(value, name: str, minimum: int = 0) -> int:
    integral = isinstance(value, numbers.Integral) or (
        isinstance(value, numbers.Real) and float(value).is_integer()
    )
    if isinstance(value, (bool, np.bool_)) or not integral:
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value!r}")
    return int(value)


def check_queue_lengths(X) -> np.ndarray:
    """Flatten queue lengths to a 1-D int array; a single column 2-D array is accepted."""
    arr = np.asarray(X)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ConfigError(f"queue lengths must be 1-D or a single column, got shape {arr.shape}")
    if arr.size and (not np.all(np.isfinite(arr.astype(float))) or np.any(arr < 0) or np.any(arr != np.floor(arr))):
        raise ConfigError("queue lengths must be non-negative integers")
    return arr.astype(np.int64)


def exactly_one(config: dict, keys, where: str = "config"):
    present = [k for k in keys if config.get(k) is not None]
    if len(present) != 1:
        raise ConfigError(f"{where} needs exactly one of {', '.join(keys)}; got {present or 'none'}")
    return present[0]
