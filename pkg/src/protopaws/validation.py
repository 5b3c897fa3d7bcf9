"""Input validation helpers used across the package and by the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import ContractError

UNIT_NORM_ATOL = 1e-5


def as_float_matrix(X, name: str = "X", dtype=None) -> np.ndarray:
    """Coerce to a 2-D float array and check finiteness."""
    arr = np.asarray(X, dtype=dtype)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def normalize_rows(X: np.ndarray, name: str = "X") -> np.ndarray:
    """Scale each row to unit Euclidean norm. Zero rows are a contract violation."""
    X = as_float_matrix(X, name)
    norms = np.linalg.norm(X.astype(np.float64), axis=1)
    if np.any(norms < 1e-12):
        raise ContractError(f"{name} has a zero row; cannot normalize")
    return (X / norms[:, None].astype(X.dtype)).astype(X.dtype)


def check_unit_rows(X: np.ndarray, name: str = "X", atol: float = UNIT_NORM_ATOL) -> np.ndarray:
    X = as_float_matrix(X, name)
    norms = np.linalg.norm(X.astype(np.float64), axis=1)
    if X.shape[0] and np.max(np.abs(norms - 1.0)) > atol:
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ContractError(f"{name} rows must be unit norm (worst deviation {worst:.3g})")
    return X


def check_labels(labels, n_classes: int, name: str = "labels") -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ContractError(f"{name} must be 1-D")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"{name} must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"{name} must lie in [0, {n_classes})")
    return labels.astype(np.int64)


def check_simplex(p, name: str = "p", atol: float = 1e-6) -> np.ndarray:
    """Check that the last axis of ``p`` holds probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -atol):
        raise ContractError(f"{name} has negative entries")
    sums = p.sum(axis=-1)
    if p.size and np.max(np.abs(sums - 1.0)) > atol:
        raise ContractError(f"{name} rows must sum to 1")
    return p


def check_index_bounds(indices, n: int, name: str = "indices") -> np.ndarray:
    indices = np.asarray(indices)
    if indices.ndim != 1:
        raise ContractError(f"{name} must be 1-D")
    indices = indices.astype(np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise ContractError(f"{name} out of range for size {n}")
    return indices
