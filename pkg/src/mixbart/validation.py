"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np

from .exceptions import DataError

__all__ = ["check_design", "check_counts", "check_regions"]


def check_design(a, name: str, n_rows: int | None = None, n_cols: int | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DataError(f"{name} must be two-dimensional, got shape {a.shape}")
    if n_rows is not None and a.shape[0] != n_rows:
        raise DataError(f"{name} has {a.shape[0]} rows, expected {n_rows}")
    if n_cols is not None and a.shape[1] != n_cols:
        raise DataError(f"{name} has {a.shape[1]} columns, expected {n_cols}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains missing or non-finite values")
    return a


def check_counts(y, n_rows: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_rows,):
        raise DataError(f"y must have shape ({n_rows},), got {y.shape}")
    yf = y.astype(float)
    if not np.all(np.isfinite(yf)) or np.any(yf < 0) or np.any(yf != np.round(yf)):
        raise DataError("y must hold nonnegative integer counts")
    return yf.astype(np.int64)


def check_regions(regions, n_rows: int, n_regions: int) -> np.ndarray:
    if regions is None:
        if n_regions != 1:
            raise DataError("regions are required when the graph has more than one region")
        return np.zeros(n_rows, dtype=np.int64)
    r = np.asarray(regions)
    if r.shape != (n_rows,):
        raise DataError(f"regions must have shape ({n_rows},), got {r.shape}")
    if not np.issubdtype(r.dtype, np.integer):
        raise DataError("regions must be integer indices into the adjacency order")
    if r.min(initial=0) < 0 or r.max(initial=0) >= n_regions:
        raise DataError(f"region indices must lie in [0, {n_regions})")
    return r.astype(np.int64)
