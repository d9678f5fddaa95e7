"""Dense SPD linear algebra and gradient-checking primitives.

Conventions used throughout the package:

- a Vector is a 1-D float64 ndarray, a Matrix is a 2-D float64 ndarray;
- everything runs in 64-bit floats end to end (gradient checks at 1e-3
  tolerance are not reliable in 32-bit);
- covariance matrices are never inverted explicitly. Every application of
  an inverse goes through a Cholesky factor (`SpdFactor`), which is both
  faster and far better behaved for the near-singular covariances that
  small sample counts produce.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NonFiniteValue, NotPositiveDefinite, NotSymmetric

SYMMETRY_ATOL = 1e-10
REGULARIZATION_SCALE = 1e-6


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {v.shape}")
    return v


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    return m


@dataclass(frozen=True)
class SpdFactor:
    """Lower-triangular Cholesky factor L of a symmetric positive-definite M.

    L @ L.T reconstructs M within factorization tolerance; the diagonal of
    L is strictly positive.
    """

    lower: np.ndarray
    dim: int

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def cholesky(m) -> SpdFactor:
    """Factor a symmetric positive-definite matrix.

    Raises NotSymmetric if m deviates from its transpose by more than
    1e-10 elementwise, NotPositiveDefinite if any pivot is non-positive
    (the usual signal that a covariance needs regularization).
    """
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"matrix must be square, got {m.shape}")
    if not np.all(np.abs(m - m.T) <= SYMMETRY_ATOL):
        raise NotSymmetric("matrix is not symmetric within 1e-10")
    try:
        lower = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return SpdFactor(lower=lower, dim=m.shape[0])


def regularize_spd(m) -> np.ndarray:
    """Add the package-wide ridge lam*I with lam = 1e-6 * trace(m)/dim.

    Guards Cholesky against the rank-deficient covariances produced by
    degenerate fits. An absolute floor of 1e-12 keeps zero-trace inputs
    (zero within-class spread) factorizable.
    """
    m = as_matrix(m)
    lam = max(REGULARIZATION_SCALE * float(np.trace(m)) / m.shape[0], 1e-12)
    return m + lam * np.eye(m.shape[0])


def half_solve(f: SpdFactor, b: np.ndarray) -> np.ndarray:
    """Return L^-1 b by forward substitution (b may be a vector or columns)."""
    if b.shape[0] != f.dim:
        raise DimensionMismatch(f"factor dim {f.dim} vs rhs dim {b.shape[0]}")
    return solve_triangular(f.lower, b, lower=True, check_finite=False)


def spd_solve(f: SpdFactor, b) -> np.ndarray:
    """Solve M x = b where M = L L^T, without forming M^-1."""
    b = as_vector(b)
    y = half_solve(f, b)
    return solve_triangular(f.lower.T, y, lower=False, check_finite=False)


def spd_solve_columns(f: SpdFactor, b: np.ndarray) -> np.ndarray:
    """spd_solve applied to every column of a (dim, n) right-hand side."""
    y = half_solve(f, b)
    return solve_triangular(f.lower.T, y, lower=False, check_finite=False)


def quadratic_form(f: SpdFactor, d) -> float:
    """Return d^T M^-1 d = ||L^-1 d||^2; non-negative, zero iff d = 0."""
    d = as_vector(d)
    y = half_solve(f, d)
    return float(y @ y)


def input_gradient_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x,
    h: float,
) -> float:
    """Compare fn's analytic gradient against centered finite differences.

    fn maps a vector to (scalar value, gradient vector). Returns the max
    over coordinates of |analytic_i - fd_i| / (|fd_i| + 1e-12) where
    fd_i = (fn(x + h e_i) - fn(x - h e_i)) / 2h.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = as_vector(x)
    _, grad = fn(x)
    grad = as_vector(grad)
    if grad.shape != x.shape:
        raise DimensionMismatch("gradient shape does not match input")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteValue("analytic gradient is non-finite")
    worst = 0.0
    probe = x.copy()
    for i in range(x.size):
        probe[i] = x[i] + h
        up, _ = fn(probe)
        probe[i] = x[i] - h
        down, _ = fn(probe)
        probe[i] = x[i]
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteValue(f"function non-finite at probe coordinate {i}")
        fd = (up - down) / (2.0 * h)
        worst = max(worst, abs(grad[i] - fd) / (abs(fd) + 1e-12))
    return worst
