"""Seeded synthetic populations drawn from known BCCG truths.

A scenario generates two of the three spirometric responses from BCCG
distributions whose parameters vary with age (and, for the median, with
height); the third is derived (``ratio = fev1 / fvc``). The two generated
responses are linked through a Gaussian copula on their z-scores. Ground
truth (true z-scores and true LLN flags) is returned separately from the
observations so fitting code never sees it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.interpolate import PchipInterpolator

from .distributions import BccgParams, _quantile_from_z, _zscore, bccg_sample, normal_quantile

RESPONSES = ("ratio", "fev1", "fvc")
TRUE_LLN_LEVELS = (0.05, 0.025)


@dataclass(frozen=True)
class Curve:
    """Function of age through control points, PCHIP or piecewise-linear between them."""

    ages: tuple[float, ...]
    values: tuple[float, ...]
    kind: str = "pchip"

    def __post_init__(self):
        if len(self.ages) != len(self.values) or len(self.ages) < 1:
            raise ValueError("curve needs matching, non-empty ages and values")
        if any(b <= a for a, b in zip(self.ages, self.ages[1:])):
            raise ValueError("curve ages must be strictly increasing")
        if self.kind not in ("pchip", "linear"):
            raise ValueError(f"unknown curve kind {self.kind!r}")

    @classmethod
    def constant(cls, value: float) -> "Curve":
        return cls((0.0,), (float(value),))

    def __call__(self, age) -> np.ndarray:
        age = np.asarray(age, dtype=float)
        if len(self.ages) == 1:
            return np.full(age.shape, self.values[0])
        if self.kind == "linear":
            x, v = np.asarray(self.ages), np.asarray(self.values)
            slope_lo = (v[1] - v[0]) / (x[1] - x[0])
            slope_hi = (v[-1] - v[-2]) / (x[-1] - x[-2])
            out = np.interp(age, x, v)
            out = np.where(age < x[0], v[0] + slope_lo * (age - x[0]), out)
            return np.where(age > x[-1], v[-1] + slope_hi * (age - x[-1]), out)
        return PchipInterpolator(self.ages, self.values, extrapolate=True)(age)


@dataclass(frozen=True)
class ResponseTruth:
    """BCCG truth for one response.

    The median is ``mu(age) * (height / ref_height) ** height_power``.
    """

    mu: Curve
    sigma: Curve
    nu: Curve
    height_power: float = 0.0
    ref_height: float = 170.0

    def params(self, age, height) -> BccgParams:
        age = np.asarray(age, dtype=float)
        mu = self.mu(age) * (np.asarray(height, dtype=float) / self.ref_height) ** self.height_power
        return BccgParams(mu, self.sigma(age), self.nu(age))


@dataclass(frozen=True)
class HeightModel:
    """Logistic growth from ``child_cm`` at age 5 to an adult plateau, with slow shrinkage after 50."""

    adult_cm: tuple[float, float] = (163.0, 176.0)  # F, M
    child_cm: float = 110.0
    growth_mid: tuple[float, float] = (11.0, 13.0)
    growth_scale: float = 2.2
    decline_per_year: float = 0.12
    cv: float = 0.04

    def mean(self, age, male) -> np.ndarray:
        age = np.asarray(age, dtype=float)
        male = np.asarray(male, dtype=bool)
        adult = np.where(male, self.adult_cm[1], self.adult_cm[0])
        mid = np.where(male, self.growth_mid[1], self.growth_mid[0])
        frac = 1.0 / (1.0 + np.exp(-(age - mid) / self.growth_scale))
        frac0 = 1.0 / (1.0 + np.exp(-(5.0 - mid) / self.growth_scale))
        growth = (frac - frac0) / (1.0 - frac0)
        h = self.child_cm + (adult - self.child_cm) * growth
        return h - self.decline_per_year * np.maximum(age - 50.0, 0.0)


@dataclass(frozen=True)
class TruthScenario:
    name: str
    truths: dict[str, ResponseTruth]
    age_mixture: tuple[tuple[float, float, float], ...] = ((1.0, 5.0, 95.0),)
    """(weight, lo, hi) uniform components."""
    male_fraction: float = 0.5
    correlation: float = 0.8
    height: HeightModel = field(default_factory=HeightModel)
    seed: int = 0

    def __post_init__(self):
        keys = set(self.truths)
        if len(keys) != 2 or not keys <= set(RESPONSES):
            raise ValueError("a scenario generates exactly two of ratio, fev1, fvc")
        if not -1 < self.correlation < 1:
            raise ValueError("copula correlation must lie in (-1, 1)")
        if not 0 <= self.male_fraction <= 1:
            raise ValueError("male_fraction must lie in [0, 1]")
        weights = [w for w, _, _ in self.age_mixture]
        if any(w <= 0 for w in weights) or any(hi <= lo for _, lo, hi in self.age_mixture):
            raise ValueError("invalid age mixture")

    @property
    def age_range(self) -> tuple[float, float]:
        return min(lo for _, lo, _ in self.age_mixture), max(hi for _, _, hi in self.age_mixture)

    @property
    def generated(self) -> tuple[str, str]:
        return tuple(r for r in RESPONSES if r in self.truths)

    @property
    def derived(self) -> str:
        return next(r for r in RESPONSES if r not in self.truths)

    def validate(self, n_grid: int = 2001) -> None:
        """Check positivity of mu and sigma on a dense age grid (over both sexes' heights)."""
        lo, hi = self.age_range
        age = np.linspace(lo, hi, n_grid)
        for male in (False, True):
            h = self.height.mean(age, np.full(age.shape, male))
            for name, truth in self.truths.items():
                mu = truth.mu(age) * (h / truth.ref_height) ** truth.height_power
                sigma = truth.sigma(age)
                nu = truth.nu(age)
                if not (np.all(np.isfinite(mu)) and np.all(mu > 0)):
                    raise ValueError(f"{self.name}: mu for {name} not positive on the age range")
                if not (np.all(np.isfinite(sigma)) and np.all(sigma > 0)):
                    raise ValueError(f"{self.name}: sigma for {name} not positive on the age range")
                if not np.all(np.isfinite(nu)):
                    raise ValueError(f"{self.name}: nu for {name} not finite")


@dataclass
class SyntheticData:
    observations: pd.DataFrame
    """id, sex, age, height, weight, ratio, fev1, fvc."""
    truth: pd.DataFrame
    """id plus true mu/sigma/nu, z-score and LLN flags for each generated response."""


def _correlated_response(p: BccgParams, z_first: np.ndarray, rho: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Second response whose z-score has correlation ``rho`` with ``z_first``; out-of-support draws are redrawn."""
    mu, sigma, nu = (np.broadcast_to(a, z_first.shape) for a in p.arrays())
    y = np.empty(z_first.shape)
    z = np.empty(z_first.shape)
    todo = np.arange(z_first.size)
    for _ in range(1000):
        cand = rho * z_first[todo] + np.sqrt(1.0 - rho * rho) * rng.standard_normal(todo.size)
        vals, inside = _quantile_from_z(cand, mu[todo], sigma[todo], nu[todo])
        y[todo[inside]] = vals[inside]
        z[todo[inside]] = cand[inside]
        todo = todo[~inside]
        if todo.size == 0:
            return y, z
    raise ValueError("could not draw inside the support")


def generate(scenario: TruthScenario, n: int, seed: int | None = None) -> SyntheticData:
    """Draw ``n`` subjects from ``scenario`` (seed defaults to ``scenario.seed``)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    scenario.validate(n_grid=201)
    rng = np.random.default_rng(scenario.seed if seed is None else seed)

    weights = np.array([w for w, _, _ in scenario.age_mixture], dtype=float)
    comp = rng.choice(len(weights), size=n, p=weights / weights.sum())
    lo = np.array([c[1] for c in scenario.age_mixture])[comp]
    hi = np.array([c[2] for c in scenario.age_mixture])[comp]
    age = lo + (hi - lo) * rng.random(n)
    male = rng.random(n) < scenario.male_fraction
    h_mean = scenario.height.mean(age, male)
    height = h_mean * (1.0 + scenario.height.cv * rng.standard_normal(n))
    bmi = 16.0 + 9.0 * np.clip((age - 5.0) / 35.0, 0.0, 1.0) + 3.0 * rng.standard_normal(n)
    weight = np.clip(bmi, 12.0, None) * (height / 100.0) ** 2

    first, second = scenario.generated
    p1 = scenario.truths[first].params(age, height)
    p2 = scenario.truths[second].params(age, height)
    y1 = bccg_sample(p1, n, rng)
    z1 = np.asarray(_zscore(y1, *p1.arrays()), dtype=float)
    y2, z2 = _correlated_response(p2, z1, scenario.correlation, rng)

    values = {first: y1, second: y2}
    if scenario.derived == "ratio":
        values["ratio"] = values["fev1"] / values["fvc"]
    elif scenario.derived == "fev1":
        values["fev1"] = values["ratio"] * values["fvc"]
    else:
        values["fvc"] = values["fev1"] / values["ratio"]

    ids = np.arange(1, n + 1)
    obs = pd.DataFrame(
        {
            "id": ids,
            "sex": np.where(male, "M", "F"),
            "age": age,
            "height": height,
            "weight": weight,
            "ratio": values["ratio"],
            "fev1": values["fev1"],
            "fvc": values["fvc"],
        }
    )
    truth = {"id": ids}
    for name, p, z in ((first, p1, z1), (second, p2, z2)):
        mu, sigma, nu = (np.broadcast_to(a, (n,)) for a in p.arrays())
        truth[f"{name}_mu"] = mu
        truth[f"{name}_sigma"] = sigma
        truth[f"{name}_nu"] = nu
        truth[f"{name}_z"] = z
        for level in TRUE_LLN_LEVELS:
            truth[f"{name}_below_lln_{level:g}"] = z < normal_quantile(level)
    return SyntheticData(obs, pd.DataFrame(truth))


def builtin_scenarios() -> list[TruthScenario]:
    """The shipped truths: ``skew-lung``, ``symmetric-homoscedastic`` and ``ratio-like``."""
    ages = (5.0, 10.0, 15.0, 20.0, 30.0, 50.0, 70.0, 95.0)
    smooth_sigma = Curve((5.0, 20.0, 40.0, 70.0, 95.0), (0.14, 0.10, 0.11, 0.14, 0.17))
    skew_lung = TruthScenario(
        name="skew-lung",
        truths={
            "fev1": ResponseTruth(
                mu=Curve(ages, (3.3, 3.45, 3.7, 3.85, 3.85, 3.45, 2.85, 2.15)),
                sigma=smooth_sigma,
                nu=Curve.constant(-0.5),
                height_power=2.0,
            ),
            "fvc": ResponseTruth(
                mu=Curve(ages, (3.95, 4.1, 4.4, 4.6, 4.65, 4.3, 3.75, 3.05)),
                sigma=smooth_sigma,
                nu=Curve.constant(-0.5),
                height_power=2.0,
            ),
        },
        correlation=0.85,
        seed=20250101,
    )
    symmetric = TruthScenario(
        name="symmetric-homoscedastic",
        truths={
            "fev1": ResponseTruth(
                mu=Curve((5.0, 20.0, 95.0), (3.2, 3.4, 3.1), kind="linear"),
                sigma=Curve.constant(0.1),
                nu=Curve.constant(1.0),
            ),
            "fvc": ResponseTruth(
                mu=Curve((5.0, 20.0, 95.0), (3.8, 4.0, 3.7), kind="linear"),
                sigma=Curve.constant(0.1),
                nu=Curve.constant(1.0),
            ),
        },
        correlation=0.85,
        seed=20250102,
    )
    ratio_like = TruthScenario(
        name="ratio-like",
        truths={
            "ratio": ResponseTruth(
                mu=Curve((5.0, 20.0, 50.0, 95.0), (0.88, 0.85, 0.79, 0.71)),
                sigma=Curve((5.0, 50.0, 95.0), (0.06, 0.07, 0.085)),
                nu=Curve.constant(2.5),
            ),
            "fvc": ResponseTruth(
                mu=Curve(ages, (3.95, 4.1, 4.4, 4.6, 4.65, 4.3, 3.75, 3.05)),
                sigma=smooth_sigma,
                nu=Curve.constant(-0.5),
                height_power=2.0,
            ),
        },
        correlation=-0.3,
        seed=20250103,
    )
    return [skew_lung, symmetric, ratio_like]


def get_scenario(name: str) -> TruthScenario:
    for sc in builtin_scenarios():
        if sc.name == name:
            return sc
    raise KeyError(f"unknown scenario {name!r}")
