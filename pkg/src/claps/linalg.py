"""Dense linear algebra for the last-layer head.

Only what the Laplace head needs: a checked Cholesky factorization,
forward substitution, the quadratic form ``phi^T M^{-1} phi`` and a ridge
solve. Storage is plain ``float64`` ndarrays; factorization and triangular
solves delegate to LAPACK through numpy/scipy.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import DimensionMismatch, NotPositiveDefinite, NotSymmetric

SYMMETRY_RTOL = 1e-10


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular ``L`` with ``L @ L.T`` equal to the factored matrix."""

    lower: np.ndarray

    @property
    def dim(self):
        return self.lower.shape[0]

    def reconstruct(self):
        return self.lower @ self.lower.T


def _as_matrix(m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def cholesky(m):
    """Factor a symmetric positive-definite matrix.

    Parameters
    ----------
    m : array_like of shape (d, d)
        Symmetric within a relative tolerance of 1e-10. Small asymmetry is
        removed by averaging with the transpose before factorizing.

    Returns
    -------
    CholeskyFactor

    Raises
    ------
    NotSymmetric
        If ``m`` is not square or its asymmetry exceeds the tolerance.
    NotPositiveDefinite
        If any pivot is non-positive. No pivoting or jitter is applied.
    """
    m = _as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise NotSymmetric(f"matrix is not square: {m.shape}")
    scale = max(np.max(np.abs(m)), np.finfo(float).tiny)
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asym > SYMMETRY_RTOL * scale:
        raise NotSymmetric(f"relative asymmetry {asym / scale:.3e} exceeds {SYMMETRY_RTOL}")
    sym = 0.5 * (m + m.T)
    try:
        lower = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.diag(lower) > 0):
        raise NotPositiveDefinite("zero pivot encountered")
    return CholeskyFactor(lower)


def solve_lower(factor, b):
    """Forward substitution ``L x = b``; ``b`` may be a vector or a (d, k) block."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != factor.dim:
        raise DimensionMismatch(f"rhs has leading size {b.shape[0]}, factor is {factor.dim}")
    return solve_triangular(factor.lower, b, lower=True, check_finite=False)


def solve_spd(factor, b):
    """Solve ``M x = b`` with ``M = L L^T`` using two triangular solves."""
    y = solve_lower(factor, b)
    return solve_triangular(factor.lower.T, y, lower=False, check_finite=False)


def quad_form_via_chol(factor, phi):
    """Return ``phi^T M^{-1} phi`` as ``||L^{-1} phi||^2``.

    ``phi`` may also be an (n, d) matrix of row vectors, in which case an
    array of n quadratic forms is returned.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        if phi.shape[0] != factor.dim:
            raise DimensionMismatch(f"phi has length {phi.shape[0]}, factor is {factor.dim}")
        u = solve_lower(factor, phi)
        return float(u @ u)
    if phi.ndim != 2 or phi.shape[1] != factor.dim:
        raise DimensionMismatch(f"phi has shape {phi.shape}, factor is {factor.dim}")
    u = solve_lower(factor, phi.T)
    return np.einsum("ij,ij->j", u, u)


def precision_matrix(phi, lam, sigma2):
    """``lam * I + phi^T phi / sigma2``."""
    phi = _as_matrix(phi)
    d = phi.shape[1]
    return lam * np.eye(d) + (phi.T @ phi) / sigma2


def ridge_solve(phi, y, lam, sigma2):
    """Minimize ``||y - phi w||^2 / (2 sigma2) + lam ||w||^2 / 2``.

    Solves ``(lam I + phi^T phi / sigma2) w = phi^T y / sigma2`` through the
    Cholesky factor of the precision.
    """
    return ridge_solve_factored(phi, y, lam, sigma2)[0]


def ridge_solve_factored(phi, y, lam, sigma2):
    """As :func:`ridge_solve` but also returns the precision's Cholesky factor."""
    phi = _as_matrix(phi)
    y = np.asarray(y, dtype=float).ravel()
    if phi.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"phi has {phi.shape[0]} rows but y has length {y.shape[0]}")
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    factor = cholesky(precision_matrix(phi, lam, sigma2))
    w = solve_spd(factor, phi.T @ y / sigma2)
    return w, factor
