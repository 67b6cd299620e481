"""Input validation helpers shared by the functional API and the estimators."""
from __future__ import annotations

import numpy as np


def check_points(points, name="points", allow_empty=False, dtype=np.float64):
    """Coerce to a (N, 3) float array of finite coordinates."""
    arr = np.asarray(points, dtype=dtype)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise ValueError(f"{name} must be non-empty")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def check_segment_batch(X, n_points=None):
    """Coerce to (B, P, 3) finite float64; used by the descriptor estimator."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (n_segments, n_points, 3), got {arr.shape}")
    if n_points is not None and arr.shape[1] != n_points:
        raise ValueError(f"expected {n_points} points per segment, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("segment batch contains non-finite coordinates")
    return arr


def check_rotation(R, atol=1e-9):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if not np.allclose(R @ R.T, np.eye(3), atol=atol):
        raise ValueError("rotation is not orthonormal")
    if not np.isclose(np.linalg.det(R), 1.0, atol=atol):
        raise ValueError("rotation determinant is not +1")
    return R


def check_positive(value, name):
    if not (value > 0):
        raise ValueError(f"{name} must be > 0, got {value}")
    return value
