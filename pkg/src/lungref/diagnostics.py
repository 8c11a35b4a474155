"""Tail-calibration diagnostics for fitted reference equations.

* binned exceedance of the lower limit of normal with exact binomial bands,
* QQ points with equal-local-levels simultaneous bands,
* per-age-group z-score moments,
* status classification, cross-tabulation and Cohen's kappa.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy import special, stats

from .distributions import normal_quantile

LOW_COUNT = 20
DEFAULT_BIN_WIDTH = 7.5

# Bit weights for the (ratio, FEV1, FVC) below-LLN indicators.
STATUS_BITS = {"ratio": 4, "fev1": 2, "fvc": 1}

DEFAULT_TAXONOMY: dict[int, str] = {
    0: "normal",
    1: "possible restriction",
    2: "low FEV1 only",
    3: "low FEV1 and FVC, normal ratio",
    4: "obstruction",
    5: "obstruction with low FVC",
    6: "obstruction with low FEV1",
    7: "mixed",
}


# -- binning -------------------------------------------------------------------

def age_bins(ages, bin_width: float = DEFAULT_BIN_WIDTH, start: float | None = None):
    """Bin index of every age, plus the list of ``(lo, hi)`` edges of non-empty bins.

    Bins are ``[start + j*w, start + (j+1)*w)`` with ``start`` defaulting to
    ``floor(min(ages))``.
    """
    ages = np.asarray(ages, dtype=float)
    if ages.size == 0:
        raise ValueError("no ages supplied")
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    if start is None:
        start = math.floor(float(np.min(ages)))
    idx = np.floor((ages - start) / bin_width).astype(int)
    if np.any(idx < 0):
        raise ValueError("ages below the first bin start")
    used = np.unique(idx)
    edges = [(start + j * bin_width, start + (j + 1) * bin_width) for j in used]
    return idx, used, edges


# -- exceedance ------------------------------------------------------------------

@dataclass
class ExceedanceRow:
    age_lo: float
    age_hi: float
    n: int
    k: int
    proportion: float
    band_lo: float
    band_hi: float
    inside_band: bool
    low_count: bool


def binomial_band(n: int, level: float, coverage: float = 0.95) -> tuple[float, float]:
    """Central exact binomial acceptance band for a proportion under ``p = level``.

    ``lo`` is the smallest ``k`` with ``P(K <= k) >= (1 - coverage)/2`` and ``hi``
    the smallest with ``P(K <= k) >= (1 + coverage)/2``, both divided by ``n``.
    """
    tail = (1.0 - coverage) / 2.0
    dist = stats.binom(n, level)
    return float(dist.ppf(tail)) / n, float(dist.ppf(1.0 - tail)) / n


def exceedance_table(
    ages,
    below_lln,
    level: float = 0.05,
    bin_width: float = DEFAULT_BIN_WIDTH,
    start: float | None = None,
) -> list[ExceedanceRow]:
    """Fraction of rows below the LLN in each age bin, with its 95% acceptance band."""
    ages = np.asarray(ages, dtype=float)
    flags = np.asarray(below_lln, dtype=bool)
    if ages.size == 0:
        raise ValueError("empty input")
    if ages.shape != flags.shape:
        raise ValueError("ages and flags differ in length")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    idx, used, edges = age_bins(ages, bin_width, start)
    rows = []
    for j, (lo, hi) in zip(used, edges):
        sel = idx == j
        n = int(sel.sum())
        k = int(flags[sel].sum())
        band_lo, band_hi = binomial_band(n, level)
        prop = k / n
        rows.append(
            ExceedanceRow(lo, hi, n, k, prop, band_lo, band_hi, band_lo <= prop <= band_hi, n < LOW_COUNT)
        )
    return rows


def exceedance_summary(rows: Sequence[ExceedanceRow]) -> dict:
    """Pass counts over bins that are not flagged low-count."""
    scored = [r for r in rows if not r.low_count]
    passed = sum(r.inside_band for r in scored)
    return {
        "bins": len(rows),
        "scored_bins": len(scored),
        "bins_inside": passed,
        "bins_outside": len(scored) - passed,
        "pass_rate": passed / len(scored) if scored else None,
    }


# -- QQ with equal local levels ----------------------------------------------------

@dataclass
class EllBand:
    n: int
    coverage: float
    alpha_ell: float
    lo_z: np.ndarray
    hi_z: np.ndarray

    @property
    def ranks(self) -> np.ndarray:
        return np.arange(1, self.n + 1)

    def contains(self, z) -> bool:
        """True when every sorted value lies inside its rank's band."""
        zs = np.sort(np.asarray(z, dtype=float))
        if zs.size != self.n:
            raise ValueError("sample size differs from the band's n")
        return bool(np.all((zs >= self.lo_z) & (zs <= self.hi_z)))

    def outside(self, z) -> np.ndarray:
        zs = np.sort(np.asarray(z, dtype=float))
        return (zs < self.lo_z) | (zs > self.hi_z)


def _min_local_level(u_sorted: np.ndarray, n: int) -> np.ndarray:
    i = np.arange(1, n + 1)
    cdf = special.betainc(i, n - i + 1, u_sorted)
    return np.min(2.0 * np.minimum(cdf, 1.0 - cdf), axis=-1)


def ell_qq_band(n: int, coverage: float = 0.95, mc_reps: int = 10000, seed: int = 0) -> EllBand:
    """Equal-local-levels simultaneous band for a normal QQ plot of ``n`` points.

    Every order statistic gets the same two-sided local level ``alpha_ell``,
    calibrated by simulation so that a whole sample from the null lies inside
    the band with probability ``coverage``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0 < coverage < 1:
        raise ValueError("coverage must lie in (0, 1)")
    if n == 1:
        alpha = 1.0 - coverage
    else:
        rng = np.random.default_rng(seed)
        chunk = max(1, min(mc_reps, 2_000_000 // n))
        mins = []
        for start in range(0, mc_reps, chunk):
            reps = min(chunk, mc_reps - start)
            u = np.sort(rng.random((reps, n)), axis=1)
            mins.append(_min_local_level(u, n))
        alpha = float(np.quantile(np.concatenate(mins), 1.0 - coverage))
    i = np.arange(1, n + 1)
    lo = special.betaincinv(i, n - i + 1, alpha / 2.0)
    hi = special.betaincinv(i, n - i + 1, 1.0 - alpha / 2.0)
    return EllBand(n, coverage, alpha, np.asarray(normal_quantile(lo)), np.asarray(normal_quantile(hi)))


@dataclass
class QQData:
    theoretical: np.ndarray
    empirical: np.ndarray
    reference_z: float = field(default_factory=lambda: float(normal_quantile(0.05)))


def qq_points(z) -> QQData:
    """Sorted z-scores against normal quantiles at plotting positions ``(i - 0.5)/n``."""
    z = np.sort(np.asarray(z, dtype=float))
    n = z.size
    if n == 0:
        raise ValueError("no z-scores supplied")
    theoretical = np.asarray(normal_quantile((np.arange(1, n + 1) - 0.5) / n), dtype=float)
    return QQData(np.atleast_1d(theoretical), z)


# -- per-group summaries -----------------------------------------------------------

@dataclass
class GroupSummary:
    age_lo: float
    age_hi: float
    n: int
    mean: float
    sd: float
    skewness: float
    low_count: bool
    degenerate: bool


def zscore_group_summary(
    z, ages, bin_width: float = DEFAULT_BIN_WIDTH, start: float | None = None
) -> list[GroupSummary]:
    """Mean, SD (n-1 denominator) and moment skewness of z-scores per age bin."""
    z = np.asarray(z, dtype=float)
    idx, used, edges = age_bins(ages, bin_width, start)
    out = []
    for j, (lo, hi) in zip(used, edges):
        v = z[idx == j]
        n = v.size
        mean = float(np.mean(v))
        sd = float(np.std(v, ddof=1)) if n > 1 else 0.0
        m2 = float(np.mean((v - mean) ** 2))
        degenerate = m2 <= 1e-300
        skew = float(np.mean((v - mean) ** 3) / m2**1.5) if not degenerate else float("nan")
        out.append(GroupSummary(lo, hi, n, mean, sd, skew, n < LOW_COUNT, degenerate))
    return out


# -- status classification and agreement ---------------------------------------------

def classify_status(ratio_low, fev1_low, fvc_low):
    """Encode below-LLN indicators as ``4*ratio + 2*FEV1 + FVC`` (scalar or array)."""
    code = (
        STATUS_BITS["ratio"] * np.asarray(ratio_low, dtype=int)
        + STATUS_BITS["fev1"] * np.asarray(fev1_low, dtype=int)
        + STATUS_BITS["fvc"] * np.asarray(fvc_low, dtype=int)
    )
    return int(code) if code.ndim == 0 else code


def status_names(codes, taxonomy: Mapping[int, str] = DEFAULT_TAXONOMY) -> list[str]:
    missing = set(range(8)) - set(taxonomy)
    if missing:
        raise ValueError(f"taxonomy does not cover codes {sorted(missing)}")
    return [taxonomy[int(c)] for c in np.atleast_1d(codes)]


@dataclass
class StatusTable:
    labels: list
    cross_tab: np.ndarray
    kappa: float | None
    p_observed: float
    p_expected: float
    counts_a: dict
    counts_b: dict
    percent_a: dict
    percent_b: dict

    @property
    def n(self) -> int:
        return int(self.cross_tab.sum())


def cohen_kappa(table: np.ndarray) -> tuple[float | None, float, float]:
    """Kappa, observed and chance agreement from a square contingency table.

    Kappa is ``None`` when chance agreement is 1 (both raters constant and equal).
    """
    table = np.asarray(table, dtype=float)
    if table.ndim != 2 or table.shape[0] != table.shape[1]:
        raise ValueError("contingency table must be square")
    total = table.sum()
    if total <= 0:
        raise ValueError("empty contingency table")
    p_o = float(np.trace(table) / total)
    p_e = float(np.dot(table.sum(axis=1) / total, table.sum(axis=0) / total))
    if math.isclose(p_e, 1.0, rel_tol=0.0, abs_tol=1e-15):
        return None, p_o, p_e
    return (p_o - p_e) / (1.0 - p_e), p_o, p_e


def cross_tab_and_kappa(status_a: Sequence[Hashable], status_b: Sequence[Hashable], labels=None) -> StatusTable:
    """Contingency table of two status vectors (rows: ``a``), kappa and marginals."""
    a = list(np.asarray(status_a).tolist())
    b = list(np.asarray(status_b).tolist())
    if len(a) != len(b):
        raise ValueError("status vectors differ in length")
    if not a:
        raise ValueError("empty status vectors")
    if labels is None:
        labels = sorted(set(a) | set(b))
    pos = {lab: i for i, lab in enumerate(labels)}
    table = np.zeros((len(labels), len(labels)), dtype=int)
    np.add.at(table, ([pos[v] for v in a], [pos[v] for v in b]), 1)
    kappa, p_o, p_e = cohen_kappa(table)
    n = len(a)
    rows, cols = table.sum(axis=1), table.sum(axis=0)
    return StatusTable(
        labels=list(labels),
        cross_tab=table,
        kappa=kappa,
        p_observed=p_o,
        p_expected=p_e,
        counts_a={lab: int(c) for lab, c in zip(labels, rows)},
        counts_b={lab: int(c) for lab, c in zip(labels, cols)},
        percent_a={lab: 100.0 * c / n for lab, c in zip(labels, rows)},
        percent_b={lab: 100.0 * c / n for lab, c in zip(labels, cols)},
    )
