"""Small input-validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numbers

import numpy as np


def check_values(z, name: str = "z") -> np.ndarray:
    """Return ``z`` as a finite 1-D float array.

    A single-column 2-D array is accepted and flattened, which lets the
    estimators take ``X`` shaped ``(n, 1)`` as scikit-learn users expect.
    """
    arr = np.asarray(z, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional; got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_probabilities(pi, n: int, *, allow_above_one: bool = True) -> np.ndarray:
    arr = np.asarray(pi, dtype=float).reshape(-1)
    if arr.shape[0] != n:
        raise ValueError(f"expected {n} inclusion probabilities, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError("inclusion probabilities must be finite and strictly positive")
    if not allow_above_one and np.any(arr > 1 + 1e-12):
        raise ValueError("inclusion probabilities must lie in (0, 1]")
    return arr


def check_level(level) -> float:
    level = float(level)
    if not 0 < level < 1:
        raise ValueError(f"confidence level must lie in (0, 1); got {level}")
    return level


def check_tau(tau, *, allow_zero: bool = False) -> float:
    tau = float(tau)
    lo_ok = tau >= 0 if allow_zero else tau > 0
    if not (lo_ok and tau <= 1):
        interval = "[0, 1]" if allow_zero else "(0, 1]"
        raise ValueError(f"quantile level must lie in {interval}; got {tau}")
    return tau


def check_count(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer; got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}; got {value}")
    return int(value)


def as_theta(theta, p: int) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(theta, dtype=float)).reshape(-1)
    if arr.shape[0] != p:
        raise ValueError(f"theta must have {p} component(s); got {arr.shape[0]}")
    return arr


def make_rng(seed) -> np.random.Generator:
    """Accept an int, SeedSequence, Generator or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
