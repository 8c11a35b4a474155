"""Segmented (single-hinge) linear regression with two-piece constant variance."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .distributions import normal_quantile
from .gamlss import design_matrix, ic_values

logger = logging.getLogger(__name__)

GRID_SIZE = 200
MIN_SEGMENT = 10


@dataclass
class FittedSlrModel:
    response: str
    covariates: tuple[str, ...]
    coefficients: np.ndarray
    """Intercept, age slope, covariate slopes, then the hinge slope (absent when simple_linear)."""
    psi: float | None
    sd_low: float
    sd_high: float
    n_low: int
    n_high: int
    simple_linear: bool
    rss: float
    grid: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    grid_rss: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    @property
    def n(self) -> int:
        return self.n_low + self.n_high

    @property
    def n_params(self) -> int:
        """Mean coefficients, breakpoint and residual SDs."""
        if self.simple_linear:
            return len(self.coefficients) + 1
        return len(self.coefficients) + 3

    def to_dict(self) -> dict:
        return {
            "kind": "slr",
            "response": self.response,
            "covariates": list(self.covariates),
            "coefficients": [float(c) for c in self.coefficients],
            "psi": None if self.psi is None else float(self.psi),
            "sd_low": float(self.sd_low),
            "sd_high": float(self.sd_high),
            "n_low": int(self.n_low),
            "n_high": int(self.n_high),
            "simple_linear": bool(self.simple_linear),
            "rss": float(self.rss),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FittedSlrModel":
        if d.get("kind") != "slr":
            raise ValueError("not a serialised SLR model")
        return cls(
            response=d["response"],
            covariates=tuple(d["covariates"]),
            coefficients=np.asarray(d["coefficients"], dtype=float),
            psi=d["psi"],
            sd_low=float(d["sd_low"]),
            sd_high=float(d["sd_high"]),
            n_low=int(d["n_low"]),
            n_high=int(d["n_high"]),
            simple_linear=bool(d["simple_linear"]),
            rss=float(d["rss"]),
        )


def _base_design(data: Mapping, covariates: Sequence[str]) -> np.ndarray:
    terms = ["1", "age"] + [c for c in covariates if c != "age"]
    return design_matrix(data, terms)


def _ols(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ coef
    return coef, float(r @ r)


def _hinge_rss(X0, age, y, psi) -> float:
    X = np.column_stack([X0, np.maximum(age - psi, 0.0)])
    return _ols(X, y)[1]


_INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


def _golden_section(f, a: float, b: float, tol: float) -> tuple[float, float]:
    c, d = b - _INV_PHI * (b - a), a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def _segment_sd(resid: np.ndarray, leverage: np.ndarray) -> float:
    """Residual SD with the segment's share of the hat-matrix trace as its parameter count."""
    dof = max(resid.size - float(np.sum(leverage)), 1.0)
    return float(np.sqrt(resid @ resid / dof))


def fit_slr(
    data: Mapping,
    response: str = "y",
    covariates: Sequence[str] = (),
    allow_breakpoint: bool = True,
) -> FittedSlrModel:
    """Fit ``y ~ 1 + age + covariates + (age - psi)_+`` by profiling RSS over psi.

    ``psi`` is searched on 200 equally spaced candidates between the 5th and
    95th age percentiles, then refined by golden-section search inside the
    winning grid cell. If either side of the breakpoint holds fewer than 10
    rows the model falls back to plain OLS (``simple_linear``).
    """
    y = np.asarray(data[response], dtype=float)
    age = np.asarray(data["age"], dtype=float)
    n = y.size
    if n < 30:
        raise ValueError(f"need at least 30 observations, got {n}")
    covariates = tuple(c for c in covariates if c != "age")
    X0 = _base_design(data, covariates)

    grid = np.empty(0)
    grid_rss = np.empty(0)
    psi = None
    if allow_breakpoint:
        lo, hi = np.percentile(age, [5, 95])
        grid = np.linspace(lo, hi, GRID_SIZE)
        grid_rss = np.array([_hinge_rss(X0, age, y, g) for g in grid])
        j = int(np.argmin(grid_rss))
        a, b = grid[max(j - 1, 0)], grid[min(j + 1, GRID_SIZE - 1)]
        t_best, rss_best = _golden_section(lambda t: _hinge_rss(X0, age, y, t), a, b, tol=0.01)
        psi = t_best if rss_best <= grid_rss[j] else float(grid[j])
        low = age <= psi
        if low.sum() < MIN_SEGMENT or (~low).sum() < MIN_SEGMENT:
            warnings.warn("breakpoint leaves fewer than 10 rows in a segment; fitting a simple linear model")
            psi = None

    if psi is None:
        X = X0
    else:
        X = np.column_stack([X0, np.maximum(age - psi, 0.0)])
    coef, rss = _ols(X, y)
    resid = y - X @ coef
    Q, _ = np.linalg.qr(X)
    leverage = np.sum(Q * Q, axis=1)

    if psi is None:
        sd = _segment_sd(resid, leverage)
        return FittedSlrModel(response, covariates, coef, None, sd, sd, n, 0, True, rss, grid, grid_rss)
    low = age <= psi
    return FittedSlrModel(
        response=response,
        covariates=covariates,
        coefficients=coef,
        psi=psi,
        sd_low=_segment_sd(resid[low], leverage[low]),
        sd_high=_segment_sd(resid[~low], leverage[~low]),
        n_low=int(low.sum()),
        n_high=int((~low).sum()),
        simple_linear=False,
        rss=rss,
        grid=grid,
        grid_rss=grid_rss,
    )


def slr_predict(model: FittedSlrModel, covariates: Mapping) -> np.ndarray:
    X = _base_design(covariates, model.covariates)
    if not model.simple_linear:
        age = np.asarray(covariates["age"], dtype=float)
        X = np.column_stack([X, np.maximum(age - model.psi, 0.0)])
    return X @ model.coefficients


def segment_sd(model: FittedSlrModel, age) -> np.ndarray:
    age = np.asarray(age, dtype=float)
    if model.simple_linear:
        return np.full(age.shape, model.sd_low)
    return np.where(age <= model.psi, model.sd_low, model.sd_high)


def slr_zscore(y, model: FittedSlrModel, covariates: Mapping) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return (y - slr_predict(model, covariates)) / segment_sd(model, covariates["age"])


def slr_lln(model: FittedSlrModel, covariates: Mapping, level: float = 0.05) -> np.ndarray:
    return slr_predict(model, covariates) + normal_quantile(level) * segment_sd(model, covariates["age"])


def slr_information_criteria(model: FittedSlrModel, data: Mapping) -> dict[str, float]:
    """Normal-likelihood deviance, AIC and BIC on ``data``."""
    y = np.asarray(data[model.response], dtype=float)
    sd = segment_sd(model, data["age"])
    z = (y - slr_predict(model, data)) / sd
    deviance = float(np.sum(z * z + 2.0 * np.log(sd) + np.log(2.0 * np.pi)))
    return ic_values(deviance, model.n_params, y.size)
