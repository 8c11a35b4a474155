"""BCCG distributional regression fitted with the RS (cyclic penalised IRLS) algorithm.

Each distribution parameter ``k`` in (mu, sigma, nu) has a predictor

    g_k(theta_k) = X_k beta_k + B_k a_k

where ``X_k`` holds parametric columns (intercept, covariate transforms and
explicit product interactions) and ``B_k`` an optional P-spline in one
covariate. Parameters are updated one at a time with the others held fixed.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .distributions import NU_EPS, BccgParams, _logpdf, _zscore, bccg_quantile, bccg_zscore
from .splines import SplineBasisSpec, bspline_basis, bspline_derivative_basis, difference_penalty, lambda_for_edf

logger = logging.getLogger(__name__)

PARAM_NAMES = ("mu", "sigma", "nu")
BASE_COVARIATES = ("age", "height", "weight")
_TRANSFORMS = {"": lambda v: v, "log_": np.log}


class ExtrapolationWarning(UserWarning):
    """Prediction requested outside the covariate range seen during fitting."""


class DegenerateDataError(ValueError):
    """Data cannot support the requested fit."""


# -- formulas ----------------------------------------------------------------

@dataclass(frozen=True)
class SmoothTerm:
    covariate: str = "age"
    target_edf: float = 6.0
    n_interior_knots: int = 20
    degree: int = 3
    penalty_order: int = 2


@dataclass(frozen=True)
class ParamFormula:
    """Link plus predictor terms for one distribution parameter.

    ``linear_terms`` draws from ``1, age, log_age, height, log_height,
    weight, log_weight``; an interaction is written as a product such as
    ``"log_age:log_height"``. The intercept is always included.
    """

    link: str = "log"
    linear_terms: tuple[str, ...] = ("1",)
    smooth: SmoothTerm | None = None

    def __post_init__(self):
        if self.link not in ("log", "identity"):
            raise ValueError(f"unknown link {self.link!r}")
        terms = tuple(dict.fromkeys(("1",) + tuple(t for t in self.linear_terms if t != "1")))
        for term in terms:
            for factor in term.split(":"):
                if factor != "1":
                    _split_transform(factor)
        object.__setattr__(self, "linear_terms", terms)
        if isinstance(self.smooth, Mapping):
            object.__setattr__(self, "smooth", SmoothTerm(**self.smooth))

    def covariates(self) -> set[str]:
        names = {_split_transform(f)[1] for t in self.linear_terms for f in t.split(":") if f != "1"}
        if self.smooth is not None:
            names.add(self.smooth.covariate)
        return names


@dataclass(frozen=True)
class Convergence:
    max_outer: int = 50
    deviance_tol: float = 1e-4
    step_halvings_max: int = 10
    max_inner: int = 10

    def __post_init__(self):
        if self.deviance_tol <= 0 or self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("convergence limits must be positive")


def _default_mu():
    return ParamFormula("log", ("1", "log_height"), SmoothTerm("age", 10.0))


def _default_sigma():
    return ParamFormula("log", ("1",), SmoothTerm("age", 6.0))


def _default_nu():
    return ParamFormula("identity", ("1",))


@dataclass(frozen=True)
class GamlssSpec:
    mu: ParamFormula = field(default_factory=_default_mu)
    sigma: ParamFormula = field(default_factory=_default_sigma)
    nu: ParamFormula = field(default_factory=_default_nu)
    convergence: Convergence = field(default_factory=Convergence)
    nu_fixed: float | None = None

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if isinstance(value, Mapping):
                value = ParamFormula(**{**value, "linear_terms": tuple(value.get("linear_terms", ("1",)))})
                object.__setattr__(self, name, value)
        if isinstance(self.convergence, Mapping):
            object.__setattr__(self, "convergence", Convergence(**self.convergence))
        if self.mu.link != "log" or self.sigma.link != "log":
            raise ValueError("mu and sigma require the log link")

    def formula(self, name: str) -> ParamFormula:
        return getattr(self, name)

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in PARAM_NAMES:
            d[name]["linear_terms"] = list(d[name]["linear_terms"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GamlssSpec":
        return cls(**d)


def _split_transform(factor: str) -> tuple[str, str]:
    for prefix in ("log_", ""):
        if factor.startswith(prefix) and factor[len(prefix):] in BASE_COVARIATES:
            return prefix, factor[len(prefix):]
    raise ValueError(f"unknown covariate term {factor!r}")


def _column(data: Mapping, term: str, n: int) -> np.ndarray:
    col = np.ones(n)
    for factor in term.split(":"):
        if factor == "1":
            continue
        prefix, name = _split_transform(factor)
        if name not in data:
            raise KeyError(f"missing covariate {name!r}")
        values = np.asarray(data[name], dtype=float)
        if prefix == "log_" and np.any(values <= 0):
            raise ValueError(f"log transform of non-positive {name}")
        col = col * _TRANSFORMS[prefix](values)
    return col


def _n_rows(data: Mapping) -> int:
    for name in BASE_COVARIATES:
        if name in data:
            return len(np.asarray(data[name]))
    raise KeyError("data holds none of the covariates age, height, weight")


def design_matrix(data: Mapping, terms: Sequence[str]) -> np.ndarray:
    n = _n_rows(data)
    return np.column_stack([_column(data, t, n) for t in terms])


# -- fitted model ------------------------------------------------------------

@dataclass
class FittedParam:
    name: str
    link: str
    linear_terms: tuple[str, ...]
    linear_coef: np.ndarray
    smooth: SmoothTerm | None = None
    basis: SplineBasisSpec | None = None
    smooth_coef: np.ndarray | None = None
    lam: float = 0.0
    edf: float = 0.0

    def predictor(self, data: Mapping, warn: bool = True) -> np.ndarray:
        eta = design_matrix(data, self.linear_terms) @ self.linear_coef
        if self.smooth is not None:
            x = np.asarray(data[self.smooth.covariate], dtype=float)
            eta = eta + _smooth_with_extrapolation(x, self.basis, self.smooth_coef, warn)
        return eta

    def inverse_link(self, eta: np.ndarray) -> np.ndarray:
        return np.exp(eta) if self.link == "log" else eta

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "link": self.link,
            "linear_terms": list(self.linear_terms),
            "linear_coef": [float(c) for c in self.linear_coef],
            "smooth": None if self.smooth is None else asdict(self.smooth),
            "domain": None if self.basis is None else list(self.basis.domain),
            "smooth_coef": None if self.smooth_coef is None else [float(c) for c in self.smooth_coef],
            "lambda": self.lam,
            "edf": self.edf,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FittedParam":
        smooth = None if d["smooth"] is None else SmoothTerm(**d["smooth"])
        basis = None
        if smooth is not None:
            basis = SplineBasisSpec(
                domain=tuple(d["domain"]),
                degree=smooth.degree,
                n_interior_knots=smooth.n_interior_knots,
                penalty_order=smooth.penalty_order,
            )
        return cls(
            name=d["name"],
            link=d["link"],
            linear_terms=tuple(d["linear_terms"]),
            linear_coef=np.asarray(d["linear_coef"], dtype=float),
            smooth=smooth,
            basis=basis,
            smooth_coef=None if d["smooth_coef"] is None else np.asarray(d["smooth_coef"], dtype=float),
            lam=float(d["lambda"]),
            edf=float(d["edf"]),
        )


@dataclass
class FittedGamlssModel:
    response: str
    params: dict[str, FittedParam]
    global_deviance: float
    total_edf: float
    n: int
    converged: bool
    trace: list[float]
    spec: GamlssSpec

    def to_dict(self) -> dict:
        return {
            "kind": "gamlss",
            "family": "BCCG",
            "response": self.response,
            "params": {k: p.to_dict() for k, p in self.params.items()},
            "global_deviance": self.global_deviance,
            "total_edf": self.total_edf,
            "n": self.n,
            "converged": self.converged,
            "trace": list(self.trace),
            "spec": self.spec.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FittedGamlssModel":
        if d.get("kind") != "gamlss":
            raise ValueError("not a serialised GAMLSS model")
        return cls(
            response=d["response"],
            params={k: FittedParam.from_dict(v) for k, v in d["params"].items()},
            global_deviance=float(d["global_deviance"]),
            total_edf=float(d["total_edf"]),
            n=int(d["n"]),
            converged=bool(d["converged"]),
            trace=[float(v) for v in d["trace"]],
            spec=GamlssSpec.from_dict(d["spec"]),
        )


def _smooth_with_extrapolation(x, basis: SplineBasisSpec, coef: np.ndarray, warn: bool) -> np.ndarray:
    lo, hi = basis.domain
    below, above = x < lo, x > hi
    if np.any(below | above):
        if warn:
            warnings.warn(
                f"{int(np.sum(below | above))} covariate values outside the fitted range "
                f"[{lo:.3g}, {hi:.3g}]; the smooth term is extended linearly",
                ExtrapolationWarning,
                stacklevel=3,
            )
    xc = np.clip(x, lo, hi)
    f = bspline_basis(xc, basis) @ coef
    if np.any(below):
        f[below] += (bspline_derivative_basis([lo], basis) @ coef)[0] * (x[below] - lo)
    if np.any(above):
        f[above] += (bspline_derivative_basis([hi], basis) @ coef)[0] * (x[above] - hi)
    return f


# -- scores and weights --------------------------------------------------------

def _h_series(t):
    """(t e^t - e^t + 1) / t^2, stable near t = 0."""
    t = np.asarray(t, dtype=float)
    small = np.abs(t) < 0.05
    ts = np.where(small, t, 0.0)
    series = 1 / 2 + ts * (1 / 3 + ts * (1 / 8 + ts * (1 / 30 + ts * (1 / 144 + ts * (1 / 840 + ts / 5760)))))
    tb = np.where(small, 1.0, t)
    with np.errstate(over="ignore", invalid="ignore"):
        direct = (tb * np.exp(tb) - np.expm1(tb)) / (tb * tb)
    return np.where(small, series, direct)


def scores(y, mu, sigma, nu) -> dict[str, np.ndarray]:
    """Derivatives of the BCCG log density with respect to each predictor.

    mu and sigma are on the log scale, nu on the identity scale.
    """
    z = _zscore(y, mu, sigma, nu)
    log_ratio = np.log(y / mu)
    return {
        "mu": z / sigma + nu * (z * z - 1.0),
        "sigma": z * z - 1.0,
        "nu": log_ratio - z * log_ratio**2 * _h_series(nu * log_ratio) / sigma,
    }


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(40)
_GH_WEIGHTS = _GH_WEIGHTS / np.sqrt(2.0 * np.pi)


def expected_info(mu, sigma, nu) -> dict[str, np.ndarray]:
    """Expected squared scores E[u_k^2] under the model (Fisher information per row)."""
    sigma, nu = np.broadcast_arrays(np.asarray(sigma, float), np.asarray(nu, float))
    z = _GH_NODES[None, :]
    s = sigma[:, None]
    v = nu[:, None]
    base = 1.0 + v * s * z
    ok = (np.abs(v) <= NU_EPS) | (base > 0)
    small = np.abs(v) <= NU_EPS
    safe_v = np.where(small, 1.0, v)
    log_ratio = np.where(small, s * z, np.log(np.where(ok, base, 1.0)) / safe_v)
    u = log_ratio - z * log_ratio**2 * _h_series(v * log_ratio) / s
    weights = np.where(ok, _GH_WEIGHTS[None, :], 0.0)
    info_nu = (weights * u * u).sum(axis=1) / weights.sum(axis=1)
    return {
        "mu": 1.0 / sigma**2 + 2.0 * nu**2,
        "sigma": np.full(sigma.shape, 2.0),
        "nu": info_nu,
    }


# -- fitting -------------------------------------------------------------------

class _ParamState:
    """Design, penalty and current coefficients of one predictor during fitting."""

    def __init__(self, name: str, formula: ParamFormula, data: Mapping, n: int):
        self.name = name
        self.formula = formula
        self.X = design_matrix(data, formula.linear_terms)
        self.p = self.X.shape[1]
        self.basis = None
        self.P_smooth = None
        if formula.smooth is not None:
            sm = formula.smooth
            x = np.asarray(data[sm.covariate], dtype=float)
            self.basis = SplineBasisSpec.from_data(
                x, degree=sm.degree, n_interior_knots=sm.n_interior_knots, penalty_order=sm.penalty_order
            )
            self.B = bspline_basis(x, self.basis)
            self.P_smooth = difference_penalty(sm.penalty_order, self.basis.n_basis)
            self.Z = np.hstack([self.X, self.B])
        else:
            self.B = None
            self.Z = self.X
        # column scaling keeps the joint system well conditioned
        self.scale = np.sqrt(np.mean(self.Z**2, axis=0))
        self.scale[self.scale == 0] = 1.0
        self.Zs = self.Z / self.scale
        self.coef = np.zeros(self.Z.shape[1])
        self.lam = 0.0
        self.edf = float(self.p)

    @property
    def eta(self) -> np.ndarray:
        return self.Z @ self.coef

    def penalty(self, lam: float) -> np.ndarray:
        m = self.Z.shape[1]
        P = np.zeros((m, m))
        if self.B is not None:
            P[self.p:, self.p:] = lam * self.P_smooth
        return P / np.outer(self.scale, self.scale)

    def solve(self, e: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, float, float]:
        """Penalised WLS of working response ``e``; returns (coef, lambda, edf)."""
        lam = 0.0
        if self.B is not None:
            lam = lambda_for_edf(self.B, w, self.P_smooth, self.formula.smooth.target_edf)
        ZtW = self.Zs.T * w
        G = ZtW @ self.Zs
        M = G + self.penalty(lam)
        # exact overlap between intercept/linear columns and the spline's
        # null space makes M singular; the pseudo-inverse picks the min-norm split
        evals, evecs = linalg.eigh(M)
        keep = evals > evals.max() * 1e-12
        Minv = (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T
        coef_s = Minv @ (ZtW @ e)
        edf = float(np.sum(Minv * G))
        return coef_s / self.scale, lam, edf

    def to_fitted(self) -> FittedParam:
        return FittedParam(
            name=self.name,
            link=self.formula.link,
            linear_terms=self.formula.linear_terms,
            linear_coef=self.coef[: self.p].copy(),
            smooth=self.formula.smooth,
            basis=self.basis,
            smooth_coef=None if self.B is None else self.coef[self.p:].copy(),
            lam=self.lam,
            edf=self.edf,
        )


def _validate_data(data: Mapping, y: np.ndarray, spec: GamlssSpec) -> None:
    n = y.size
    if n < 50:
        raise DegenerateDataError(f"need at least 50 observations, got {n}")
    if not np.all(np.isfinite(y)) or np.any(y <= 0):
        raise DegenerateDataError("responses must be finite and positive")
    if np.ptp(y) == 0:
        raise DegenerateDataError("response is constant")
    for name in PARAM_NAMES:
        for cov in spec.formula(name).covariates():
            if cov not in data:
                raise DegenerateDataError(f"formula for {name} references missing covariate {cov!r}")
            values = np.asarray(data[cov], dtype=float)
            if values.size != n or not np.all(np.isfinite(values)):
                raise DegenerateDataError(f"covariate {cov!r} must be finite with one value per response")


def _deviance(y, etas: Mapping[str, np.ndarray], nu_const) -> float:
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        mu = np.exp(etas["mu"])
        sigma = np.exp(etas["sigma"])
        nu = etas["nu"] if nu_const is None else nu_const
        dev = -2.0 * float(np.sum(_logpdf(y, mu, sigma, nu)))
    return dev if np.isfinite(dev) else np.inf


def fit_gamlss(data: Mapping, spec: GamlssSpec | None = None, response: str = "y") -> FittedGamlssModel:
    """Fit a BCCG GAMLSS by the RS algorithm.

    Parameters
    ----------
    data : mapping of column name to array
        Must hold the response column and every covariate referenced by the
        formulas (``age``, ``height``, ``weight``).
    spec : GamlssSpec
        Formulas and convergence control. With ``spec.nu_fixed`` set, nu is
        held at that value and not estimated.
    response : str
        Key of the response column.

    Returns
    -------
    FittedGamlssModel
        ``converged`` is False when the outer iteration limit was reached.
    """
    spec = spec or GamlssSpec()
    ctrl = spec.convergence
    y = np.asarray(data[response], dtype=float)
    _validate_data(data, y, spec)
    n = y.size

    states = {name: _ParamState(name, spec.formula(name), data, n) for name in PARAM_NAMES}
    log_y = np.log(y)
    mad = 1.4826 * np.median(np.abs(log_y - np.median(log_y)))
    if mad <= 0:
        mad = np.std(log_y)
    start = {"mu": np.log(np.median(y)), "sigma": np.log(max(mad, 1e-3)), "nu": 0.5}
    if spec.nu_fixed is not None:
        start["nu"] = spec.nu_fixed
    for name, st in states.items():
        st.coef[0] = start[name]
    nu_const = None if spec.nu_fixed is None else float(spec.nu_fixed)
    active = [k for k in PARAM_NAMES if not (k == "nu" and nu_const is not None)]

    etas = {k: st.eta for k, st in states.items()}
    dev = _deviance(y, etas, nu_const)
    trace = [dev]
    converged = False

    for outer in range(ctrl.max_outer):
        dev_outer = dev
        for k in active:
            st = states[k]
            for _ in range(ctrl.max_inner):
                mu = np.exp(etas["mu"])
                sigma = np.exp(etas["sigma"])
                nu = etas["nu"] if nu_const is None else np.full(n, nu_const)
                u = scores(y, mu, sigma, nu)[k]
                w = expected_info(mu, sigma, nu)[k]
                w = np.maximum(w, 1e-6 * np.median(w))
                e = etas[k] + u / w
                coef_new, lam, edf = st.solve(e, w)

                coef_old = st.coef
                trial = dict(etas)
                accepted = False
                for _h in range(ctrl.step_halvings_max + 1):
                    trial[k] = st.Z @ coef_new
                    dev_new = _deviance(y, trial, nu_const)
                    if dev_new <= dev:
                        accepted = True
                        break
                    coef_new = 0.5 * (coef_old + coef_new)
                if not accepted:
                    break
                st.coef, st.lam, st.edf = coef_new, lam, edf
                etas[k] = trial[k]
                improvement = dev - dev_new
                dev = dev_new
                if improvement < ctrl.deviance_tol:
                    break
        trace.append(dev)
        logger.debug("outer %d: deviance %.6f", outer, dev)
        if abs(dev_outer - dev) < ctrl.deviance_tol:
            converged = True
            break

    if not converged:
        logger.warning("GAMLSS fit for %s did not converge in %d outer iterations", response, ctrl.max_outer)

    params = {k: st.to_fitted() for k, st in states.items()}
    if nu_const is not None:
        params["nu"].linear_coef[:] = 0.0
        params["nu"].linear_coef[0] = nu_const
        params["nu"].edf = 0.0
    total_edf = float(sum(params[k].edf for k in active))
    return FittedGamlssModel(
        response=response,
        params=params,
        global_deviance=dev,
        total_edf=total_edf,
        n=n,
        converged=converged,
        trace=trace,
        spec=spec,
    )


# -- prediction ----------------------------------------------------------------

def predict_params(model: FittedGamlssModel, covariates: Mapping, warn: bool = True) -> BccgParams:
    """Distribution parameters at each row of ``covariates``."""
    values = {}
    for name in PARAM_NAMES:
        par = model.params[name]
        values[name] = par.inverse_link(par.predictor(covariates, warn=warn))
    return BccgParams(values["mu"], values["sigma"], values["nu"])


def zscores(model: FittedGamlssModel, data: Mapping, y=None) -> np.ndarray:
    """z-score of every row; ``y`` defaults to ``data[model.response]``."""
    y = np.asarray(data[model.response] if y is None else y, dtype=float)
    return np.asarray(bccg_zscore(y, predict_params(model, data)), dtype=float)


def lln_curve(model: FittedGamlssModel, covariate_grid: Mapping, level: float = 0.05) -> np.ndarray:
    """Centile ``level`` (the lower limit of normal for 0.05 / 0.025) along a grid."""
    return np.asarray(bccg_quantile(level, predict_params(model, covariate_grid)), dtype=float)


def ic_values(deviance: float, edf: float, n: int) -> dict[str, float]:
    return {
        "global_deviance": float(deviance),
        "aic": float(deviance + 2.0 * edf),
        "bic": float(deviance + np.log(n) * edf),
    }


def information_criteria(model: FittedGamlssModel) -> dict[str, float]:
    """Global deviance, AIC and BIC with ``total_edf`` as the model dimension."""
    return ic_values(model.global_deviance, model.total_edf, model.n)
