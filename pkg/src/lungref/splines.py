"""B-spline bases and penalised weighted least squares (P-splines)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline


@dataclass(frozen=True)
class SplineBasisSpec:
    """Equally spaced B-spline basis on ``domain``.

    The interior knots split ``domain`` into ``n_interior_knots + 1`` equal
    intervals and the same spacing is continued ``degree`` knots beyond each
    boundary, so the basis has ``n_interior_knots + degree + 1`` columns and
    coefficients that are polynomial in the index give polynomials in ``x``.
    """

    domain: tuple[float, float]
    degree: int = 3
    n_interior_knots: int = 20
    penalty_order: int = 2

    def __post_init__(self):
        lo, hi = self.domain
        if not lo < hi:
            raise ValueError(f"empty spline domain {self.domain}")
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        if self.n_interior_knots < self.penalty_order:
            raise ValueError("n_interior_knots must be at least penalty_order")
        object.__setattr__(self, "domain", (float(lo), float(hi)))

    @classmethod
    def from_data(cls, x, pad: float = 0.01, **kwargs) -> "SplineBasisSpec":
        """Basis over the observed range of ``x`` widened by ``pad`` of its span on each side."""
        x = np.asarray(x, dtype=float)
        lo, hi = float(np.min(x)), float(np.max(x))
        span = hi - lo
        if span <= 0:
            raise ValueError("cannot build a spline basis on a constant covariate")
        return cls(domain=(lo - pad * span, hi + pad * span), **kwargs)

    @property
    def n_basis(self) -> int:
        return self.n_interior_knots + self.degree + 1

    @property
    def knots(self) -> np.ndarray:
        lo, hi = self.domain
        h = (hi - lo) / (self.n_interior_knots + 1)
        j = np.arange(-self.degree, self.n_interior_knots + 2 + self.degree)
        t = lo + h * j
        # pin the boundary knots so domain checks are exact
        t[self.degree] = lo
        t[-self.degree - 1] = hi
        return t


@dataclass
class SmoothFit:
    coefficients: np.ndarray
    lam: float
    edf: float
    basis: SplineBasisSpec | None = None


def bspline_basis(x, spec: SplineBasisSpec) -> np.ndarray:
    """Evaluate the B-spline design matrix at ``x``.

    Raises ``ValueError`` for points outside ``spec.domain``; callers that
    want extrapolation must handle it themselves.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lo, hi = spec.domain
    if np.any(~np.isfinite(x)) or np.any(x < lo) or np.any(x > hi):
        raise ValueError(f"values outside the spline domain [{lo}, {hi}]")
    return BSpline.design_matrix(x, spec.knots, spec.degree).toarray()


def bspline_derivative_basis(x, spec: SplineBasisSpec) -> np.ndarray:
    """First derivative of every basis function at ``x`` (inside the domain)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    K = spec.n_basis
    out = np.empty((x.size, K))
    for j in range(K):
        c = np.zeros(K)
        c[j] = 1.0
        out[:, j] = BSpline(spec.knots, c, spec.degree).derivative()(x)
    return out


def difference_penalty(order: int, K: int) -> np.ndarray:
    """``D.T @ D`` for the ``order``-th difference matrix ``D`` on ``K`` coefficients."""
    if not 1 <= order < K:
        raise ValueError(f"need 1 <= order < K, got order={order}, K={K}")
    D = np.diff(np.eye(K), n=order, axis=0)
    return D.T @ D


def _solve_system(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return linalg.solve(A, b, assume_a="sym")
    except (linalg.LinAlgError, ValueError):
        pass
    ridge = 1e-10 * np.trace(A)
    try:
        return linalg.solve(A + ridge * np.eye(A.shape[0]), b, assume_a="sym")
    except linalg.LinAlgError as exc:
        raise linalg.LinAlgError("penalised system singular even after ridge") from exc


def _regularize(A: np.ndarray, BtWB: np.ndarray) -> np.ndarray:
    """Add a ridge of ``1e-10 * trace(B'WB)`` when ``A`` is numerically singular.

    The ridge is scaled by the data term only so that a large penalty does not
    shrink the fit.
    """
    if np.linalg.cond(A) <= 1e14:
        return A
    return A + 1e-10 * max(np.trace(BtWB), 1e-300) * np.eye(A.shape[0])


def _gram(B, w):
    BtW = B.T * w
    return BtW @ B, BtW


def edf_for_lambda(BtWB: np.ndarray, P: np.ndarray, lam: float) -> float:
    """Trace of the smoother ``(B'WB + lam P)^-1 B'WB``."""
    A = _regularize(BtWB + lam * P, BtWB)
    return float(np.trace(linalg.solve(A, BtWB, assume_a="sym")))


def fit_penalized_wls(B, y, w, lam: float, P, basis: SplineBasisSpec | None = None) -> SmoothFit:
    """Solve ``(B'WB + lam P) a = B'Wy`` and report the effective degrees of freedom.

    A ridge of ``1e-10 * trace(B'WB)`` is added when the system is
    numerically singular.
    """
    B = np.asarray(B, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if B.shape[0] != y.size or y.size != w.size:
        raise ValueError("B, y and w have inconsistent lengths")
    if P.shape != (B.shape[1], B.shape[1]):
        raise ValueError("penalty matrix does not match the basis")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    BtWB, BtW = _gram(B, w)
    A = _regularize(BtWB + lam * P, BtWB)
    coef = _solve_system(A, BtW @ y)
    edf = float(np.trace(linalg.solve(A, BtWB, assume_a="sym")))
    return SmoothFit(coefficients=coef, lam=float(lam), edf=edf, basis=basis)


def lambda_for_edf(B, w, P, target_edf: float, tol: float = 0.01, BtWB=None) -> float:
    """Smoothing parameter giving ``target_edf`` effective degrees of freedom.

    Bisection on ``log10(lambda)``; relies on edf being decreasing in lambda.
    ``BtWB`` may be passed to reuse a precomputed Gram matrix.
    """
    if BtWB is None:
        BtWB, _ = _gram(np.asarray(B, dtype=float), np.asarray(w, dtype=float))
    K = BtWB.shape[0]
    edf0 = edf_for_lambda(BtWB, P, 0.0)
    if abs(edf0 - target_edf) < tol:
        return 0.0
    null_dim = K - np.linalg.matrix_rank(P)
    if not null_dim < target_edf < edf0:
        raise ValueError(
            f"target edf {target_edf} not attainable; must lie in ({null_dim}, {edf0:.3f})"
        )
    # scale-free bracket: lambda relative to the Gram matrix magnitude
    scale = np.trace(BtWB) / max(np.trace(P), 1e-300)
    lo, hi = np.log10(scale) - 12.0, np.log10(scale) + 12.0
    if edf_for_lambda(BtWB, P, 10.0**hi) > target_edf:
        raise ValueError(f"target edf {target_edf} too close to the penalty null space")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        e = edf_for_lambda(BtWB, P, 10.0**mid)
        if abs(e - target_edf) < tol:
            return float(10.0**mid)
        if e > target_edf:
            lo = mid
        else:
            hi = mid
    return float(10.0 ** (0.5 * (lo + hi)))
