"""Last-layer Laplace posterior on frozen backbone features.

With prior ``w ~ N(0, I/lam)`` and noise variance ``sigma2`` the posterior
over the linear head is ``N(w_map, Sigma)`` where
``Sigma^{-1} = M = lam*I + Phi^T Phi / sigma2``. Only the Cholesky factor
``L`` of ``M`` is kept; epistemic variance at a feature vector ``phi`` is
``||L^{-1} phi||^2``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import linalg
from .exceptions import DegenerateDof, DimensionMismatch

SIGMA2_FLOOR = 1e-8
ESTIMATORS = ("residual", "evidence")


@dataclass(frozen=True)
class PredictiveGaussian:
    """Posterior predictive ``N(mu, v)`` with ``v = sigma2 + epi``.

    Fields are floats for a single input or equal-length arrays for a batch.
    """

    mu: object
    v: object
    epi: object

    @property
    def sd(self):
        return np.sqrt(self.v)

    def __len__(self):
        return np.size(self.mu)


@dataclass(frozen=True)
class LaplacePosterior:
    w_map: np.ndarray
    chol_precision: linalg.CholeskyFactor
    lam: float
    sigma2: float
    n_train: int
    sigma2_estimator: str
    evidence_iterations: int = 0

    @property
    def d(self):
        return self.w_map.shape[0]

    def to_dict(self):
        return {
            "format": "claps-llla",
            "version": 1,
            "w_map": self.w_map.tolist(),
            "chol_lower": self.chol_precision.lower.tolist(),
            "lambda": float(self.lam),
            "sigma2": float(self.sigma2),
            "n_train": int(self.n_train),
            "sigma2_estimator": self.sigma2_estimator,
            "evidence_iterations": int(self.evidence_iterations),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "claps-llla":
            raise ValueError("not a claps posterior file")
        w = np.asarray(d["w_map"], dtype=float)
        lower = np.asarray(d["chol_lower"], dtype=float).reshape(w.size, w.size)
        return cls(
            w_map=w,
            chol_precision=linalg.CholeskyFactor(lower),
            lam=float(d["lambda"]),
            sigma2=float(d["sigma2"]),
            n_train=int(d["n_train"]),
            sigma2_estimator=d["sigma2_estimator"],
            evidence_iterations=int(d.get("evidence_iterations", 0)),
        )


def _check_design(phi, y):
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if phi.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"design has {phi.shape[0]} rows, target has {y.shape[0]}")
    if y.shape[0] < 1:
        raise DimensionMismatch("need at least one training row")
    return phi, y


def estimate_sigma2_residual(phi, y_centered, lam=1.0):
    """Mean squared training residual of the unit-noise ridge fit.

    The ridge here is ``(Phi^T Phi + lam I)^{-1} Phi^T y``, i.e. the noise
    scale does not enter the penalty. Floored at 1e-8.
    """
    phi, y = _check_design(phi, y_centered)
    w = _unit_ridge(phi, y, lam)
    resid = y - phi @ w
    return max(float(resid @ resid) / y.shape[0], SIGMA2_FLOOR)


def _unit_ridge(phi, y, lam):
    factor = linalg.cholesky(phi.T @ phi + lam * np.eye(phi.shape[1]))
    return linalg.solve_spd(factor, phi.T @ y)


def _trace_inverse(factor):
    inv_lower = solve_triangular(factor.lower, np.eye(factor.dim), lower=True, check_finite=False)
    return float(np.sum(inv_lower * inv_lower))


def estimate_sigma2_evidence(phi, y_centered, lam=1.0, tol=1e-6, max_iter=100, return_iterations=False):
    """Noise variance by evidence (type-II maximum likelihood) fixed point.

    Iterates ``gamma = d - lam * tr(M^{-1})`` and
    ``sigma2 <- ||y - Phi w_map||^2 / (n - gamma)`` from the residual
    estimate until the relative change drops below ``tol``.

    Raises
    ------
    DegenerateDof
        If ``n - gamma <= 1`` at any iteration; fall back to the residual
        estimator in that case.
    """
    phi, y = _check_design(phi, y_centered)
    n, d = phi.shape
    sigma2 = estimate_sigma2_residual(phi, y, lam)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        w, factor = linalg.ridge_solve_factored(phi, y, lam, sigma2)
        gamma = d - lam * _trace_inverse(factor)
        dof = n - gamma
        if dof <= 1:
            raise DegenerateDof(f"n - gamma = {dof:.4g} <= 1 (n={n}, gamma={gamma:.4g})")
        resid = y - phi @ w
        new = max(float(resid @ resid) / dof, SIGMA2_FLOOR)
        done = abs(new - sigma2) <= tol * sigma2
        sigma2 = new
        if done:
            break
    return (sigma2, iterations) if return_iterations else sigma2


def fit_llla(phi, y_centered, lam=1.0, estimator="residual"):
    """Fit the Laplace head: estimate ``sigma2``, then the MAP and factor of ``M``."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}, got {estimator!r}")
    phi, y = _check_design(phi, y_centered)
    iterations = 0
    if estimator == "residual":
        sigma2 = estimate_sigma2_residual(phi, y, lam)
    else:
        sigma2, iterations = estimate_sigma2_evidence(phi, y, lam, return_iterations=True)
    w, factor = linalg.ridge_solve_factored(phi, y, lam, sigma2)
    return LaplacePosterior(
        w_map=w,
        chol_precision=factor,
        lam=float(lam),
        sigma2=float(sigma2),
        n_train=int(phi.shape[0]),
        sigma2_estimator=estimator,
        evidence_iterations=iterations,
    )


def predictive(post, phi, target_center=0.0):
    """Gaussian predictive at one feature vector or an (n, d) batch of them."""
    phi = np.asarray(phi, dtype=float)
    epi = linalg.quad_form_via_chol(post.chol_precision, phi)
    mu = phi @ post.w_map + target_center
    if phi.ndim == 1:
        mu = float(mu)
    return PredictiveGaussian(mu=mu, v=post.sigma2 + epi, epi=epi)


def trace_sigma(post):
    """``tr(M^{-1})`` as the squared Frobenius norm of ``L^{-1}``."""
    return _trace_inverse(post.chol_precision)
