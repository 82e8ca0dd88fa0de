"""Numerical tolerances and input validation helpers shared by all modules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.utils import check_array

from .exceptions import DimensionMismatch, GridMismatch


@dataclass(frozen=True)
class NumericsConfig:
    row_sum_reject: float = 1e-9
    prob_sum: float = 1e-12
    invariant_rank_rel: float = 1e-10
    subspace_rank: float = 1e-8
    membership: float = 1e-8
    hurwitz_rel: float = 1e-8
    transition_clamp: float = 1e-12
    grid: float = 1e-12


NUMERICS = NumericsConfig()


def as_vector(x, name="vector", length=None):
    """Return ``x`` as a finite 1-D float array, optionally of a fixed length."""
    arr = check_array(np.atleast_1d(np.asarray(x, dtype=float)), ensure_2d=False,
                      input_name=name, ensure_min_samples=0)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise DimensionMismatch(f"{name} has length {arr.shape[0]}, expected {length}")
    return arr


def probability_vector(p, length=None, name="probability vector", tol=None):
    """Validate and renormalize a probability vector.

    Entries must be non-negative and sum to one within ``tol`` (default
    1e-9 on input; the returned vector is renormalized so its sum is one to
    machine precision).
    """
    tol = 1e-9 if tol is None else tol
    arr = as_vector(p, name=name, length=length)
    if np.any(arr < 0):
        raise ValueError(f"{name} has negative entries: {arr}")
    total = arr.sum()
    if abs(total - 1.0) > tol:
        raise ValueError(f"{name} sums to {total!r}, not 1")
    out = arr / total
    out.setflags(write=False)
    return out


def parse_vector(text):
    """Parse a comma-separated list of decimal literals."""
    try:
        values = [float(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError as exc:
        raise ValueError(f"cannot parse vector {text!r}") from exc
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"vector {text!r} has non-finite entries")
    return arr


def grid_steps(T, dt, tol=None):
    """Number of steps ``n`` with ``n * dt == T`` within ``tol``."""
    tol = NUMERICS.grid if tol is None else tol
    if dt <= 0 or T < 0:
        raise GridMismatch(f"need dt > 0 and T >= 0, got dt={dt}, T={T}")
    n = int(round(T / dt))
    if abs(n * dt - T) > tol * max(1.0, abs(T)) + 4 * np.finfo(float).eps * max(1.0, T):
        raise GridMismatch(f"dt={dt} does not divide T={T}")
    return n


def checkpoint_steps(times, dt, T):
    """Map checkpoint times to grid indices; each must lie on the grid in [0, T]."""
    n = grid_steps(T, dt)
    steps = []
    for t in times:
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-9 * max(1.0, t) or k < 0 or k > n:
            raise GridMismatch(f"checkpoint {t} is not a grid point of [0, {T}] with dt={dt}")
        steps.append(k)
    if list(steps) != sorted(set(steps)):
        raise GridMismatch("checkpoints must be strictly increasing")
    return np.asarray(steps, dtype=np.int64)
