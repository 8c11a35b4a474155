import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from lungref.diagnostics import (
    DEFAULT_TAXONOMY,
    age_bins,
    binomial_band,
    classify_status,
    cohen_kappa,
    cross_tab_and_kappa,
    ell_qq_band,
    exceedance_summary,
    exceedance_table,
    qq_points,
    status_names,
    zscore_group_summary,
)


def _binom_cdf(n, p, k):
    return sum(math.comb(n, j) * p**j * (1 - p) ** (n - j) for j in range(k + 1))


def _oracle_band(n, p, coverage=0.95):
    tail = (1 - coverage) / 2
    lo = next(k for k in range(n + 1) if _binom_cdf(n, p, k) >= tail)
    hi = next(k for k in range(n + 1) if _binom_cdf(n, p, k) >= 1 - tail)
    return lo / n, hi / n


# -- binomial bands ---------------------------------------------------------------------

@pytest.mark.parametrize("n,level", [(200, 0.05), (100, 0.05), (57, 0.05), (400, 0.025), (1000, 0.05), (20, 0.1)])
def test_band_matches_exact_binomial_oracle(n, level):
    assert binomial_band(n, level) == pytest.approx(_oracle_band(n, level), abs=1e-15)


def test_band_reference_values():
    assert binomial_band(200, 0.05) == (0.02, 0.08)


def test_no_exceedance_in_100_rows_is_outside():
    rows = exceedance_table(np.linspace(20.0, 27.0, 100), np.zeros(100, dtype=bool), 0.05)
    assert len(rows) == 1
    assert rows[0].band_lo == 0.01
    assert rows[0].proportion == 0.0 and not rows[0].inside_band


def test_band_contains_level_and_narrows():
    for level in (0.025, 0.05):
        for n in range(20, 1200, 7):
            lo, hi = binomial_band(n, level)
            assert lo <= level <= hi
        # along a doubling sequence the band tightens monotonically
        bands = [binomial_band(25 * 2**j, level) for j in range(8)]
        assert all(b[0] >= a[0] - 1e-15 for a, b in zip(bands, bands[1:]))
        assert all(b[1] <= a[1] + 1e-15 for a, b in zip(bands, bands[1:]))


def test_calibrated_bernoulli_flags_pass_most_bins():
    # with flags drawn at the nominal rate, "at least 11 of 12 bins inside" is
    # itself a binomial event; compare its frequency with the exact probability
    n_bin, level, reps = 500, 0.05, 400
    lo, hi = binomial_band(n_bin, level)
    dist = stats.binom(n_bin, level)
    p_in = dist.cdf(round(hi * n_bin)) - dist.cdf(round(lo * n_bin) - 1)
    p_11 = stats.binom(12, p_in).sf(10)
    rng = np.random.default_rng(21)
    hits = 0
    for _ in range(reps):
        ages = np.repeat(5.0 + 7.5 * np.arange(12), n_bin) + rng.uniform(0, 7.4, 12 * n_bin)
        rows = exceedance_table(ages, rng.random(12 * n_bin) < level, level, bin_width=7.5, start=5.0)
        s = exceedance_summary(rows)
        assert s["scored_bins"] == 12
        hits += s["bins_inside"] >= 11
    assert p_11 > 0.85
    assert abs(hits / reps - p_11) < 4 * math.sqrt(p_11 * (1 - p_11) / reps)


def test_low_count_bins_flagged_and_excluded():
    ages = np.concatenate([np.full(10, 6.0), np.full(100, 20.0)])
    flags = np.zeros(110, dtype=bool)
    flags[:5] = True
    rows = exceedance_table(ages, flags, 0.05, bin_width=7.5, start=5.0)
    assert [r.low_count for r in rows] == [True, False]
    s = exceedance_summary(rows)
    assert s["bins"] == 2 and s["scored_bins"] == 1


def test_age_bins_edges():
    idx, used, edges = age_bins(np.array([5.2, 12.4, 12.5, 30.0]), 7.5)
    assert list(idx) == [0, 0, 1, 3]
    assert edges[0] == (5.0, 12.5) and edges[-1] == (27.5, 35.0)
    with pytest.raises(ValueError):
        age_bins(np.array([4.0]), 7.5, start=5.0)


def test_exceedance_input_validation():
    with pytest.raises(ValueError):
        exceedance_table(np.array([]), np.array([], dtype=bool))
    with pytest.raises(ValueError):
        exceedance_table(np.ones(3), np.ones(2, dtype=bool))
    with pytest.raises(ValueError):
        exceedance_table(np.ones(3), np.ones(3, dtype=bool), level=1.5)


# -- QQ and equal local levels ---------------------------------------------------------------

def test_single_point_band_is_central_interval():
    band = ell_qq_band(1, 0.95)
    assert band.alpha_ell == pytest.approx(0.05)
    assert band.lo_z[0] == pytest.approx(-1.959964, abs=1e-5)
    assert band.hi_z[0] == pytest.approx(1.959964, abs=1e-5)


def test_band_reproducible_and_ordered():
    a = ell_qq_band(100, 0.95, mc_reps=4000, seed=3)
    b = ell_qq_band(100, 0.95, mc_reps=4000, seed=3)
    assert a.alpha_ell == b.alpha_ell
    assert np.all(np.diff(a.lo_z) > 0) and np.all(np.diff(a.hi_z) > 0)
    assert np.all(a.lo_z < a.hi_z)
    # local level well below the simultaneous level
    assert a.alpha_ell < 0.05 / 5


def test_band_local_level_definition():
    band = ell_qq_band(50, 0.9, mc_reps=2000, seed=1)
    i = np.arange(1, 51)
    p_lo = special.betainc(i, 50 - i + 1, special.ndtr(band.lo_z))
    p_hi = special.betainc(i, 50 - i + 1, special.ndtr(band.hi_z))
    assert np.allclose(p_lo, band.alpha_ell / 2, rtol=1e-6)
    assert np.allclose(p_hi, 1 - band.alpha_ell / 2, rtol=1e-6)


def test_band_simultaneous_coverage():
    band = ell_qq_band(100, 0.95, mc_reps=10_000, seed=11)
    fresh = np.sort(np.random.default_rng(12).standard_normal((10_000, 100)), axis=1)
    coverage = np.mean(np.all((fresh >= band.lo_z) & (fresh <= band.hi_z), axis=1))
    assert coverage == pytest.approx(0.95, abs=0.01)


def test_contains_and_outside():
    band = ell_qq_band(30, 0.95, mc_reps=2000, seed=0)
    z = special.ndtri((np.arange(1, 31) - 0.5) / 30)
    assert band.contains(z)
    shifted = z - 3.0
    assert not band.contains(shifted)
    assert band.outside(shifted).any()
    with pytest.raises(ValueError):
        band.contains(z[:-1])


def test_qq_points():
    q = qq_points(np.array([0.3, -1.0, 2.0]))
    assert np.allclose(q.theoretical, [special.ndtri(1 / 6), 0.0, special.ndtri(5 / 6)], atol=1e-9)
    assert q.theoretical[0] == pytest.approx(-0.9674, abs=1e-4)
    assert np.array_equal(q.empirical, [-1.0, 0.3, 2.0])
    assert q.reference_z == pytest.approx(-1.6449, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=50))
def test_qq_points_order_invariant(values):
    z = np.array(values)
    a, b = qq_points(z), qq_points(z[::-1])
    assert np.array_equal(a.empirical, b.empirical) and np.array_equal(a.theoretical, b.theoretical)


def test_true_model_zscores_pass_both_diagnostics_most_of_the_time():
    band = ell_qq_band(100, 0.95, mc_reps=4000, seed=2)
    rng = np.random.default_rng(3)
    reps = 300
    inside = sum(band.contains(rng.standard_normal(100)) for _ in range(reps))
    # 0.95 minus three binomial standard errors
    assert inside / reps >= 0.95 - 3 * math.sqrt(0.95 * 0.05 / reps)


# -- group summaries --------------------------------------------------------------------------

def test_group_summary_moments():
    rng = np.random.default_rng(4)
    n = 20_000
    z = rng.standard_normal(n)
    ages = rng.uniform(5, 20, n)
    rows = zscore_group_summary(z, ages, bin_width=7.5, start=5.0)
    assert len(rows) == 2
    for r in rows:
        assert abs(r.mean) < 4 / math.sqrt(r.n)
        assert abs(r.sd - 1) < 4 / math.sqrt(2 * r.n)
        assert abs(r.skewness) < 4 * math.sqrt(6 / r.n)
        sel = (ages >= r.age_lo) & (ages < r.age_hi)
        assert r.skewness == pytest.approx(stats.skew(z[sel]), rel=1e-10)
        assert r.sd == pytest.approx(np.std(z[sel], ddof=1), rel=1e-12)


def test_group_summary_degenerate_and_low_count():
    rows = zscore_group_summary(np.full(5, 0.7), np.full(5, 30.0))
    assert rows[0].degenerate and rows[0].low_count and math.isnan(rows[0].skewness)


def test_group_summary_shift_invariance():
    rng = np.random.default_rng(5)
    z = rng.standard_normal(500)
    ages = rng.uniform(10, 40, 500)
    a = zscore_group_summary(z, ages, 7.5, start=10.0)
    b = zscore_group_summary(z + 2.0, ages, 7.5, start=10.0)
    for ra, rb in zip(a, b):
        assert rb.mean == pytest.approx(ra.mean + 2.0)
        assert rb.sd == pytest.approx(ra.sd)
        assert rb.skewness == pytest.approx(ra.skewness, abs=1e-9)


# -- status and kappa ----------------------------------------------------------------------------

def test_status_encoding():
    assert classify_status(True, True, False) == 6
    assert classify_status(False, False, False) == 0
    codes = classify_status(np.array([1, 0, 1]), np.array([1, 1, 0]), np.array([1, 0, 0]))
    assert list(codes) == [7, 2, 4]


def test_taxonomy_covers_all_codes():
    assert set(DEFAULT_TAXONOMY) == set(range(8))
    assert status_names([0, 4, 6]) == ["normal", "obstruction", "obstruction with low FEV1"]
    with pytest.raises(ValueError):
        status_names([0], {0: "normal"})


def test_kappa_fixture():
    kappa, p_o, p_e = cohen_kappa(np.array([[45, 5], [15, 35]]))
    assert p_o == pytest.approx(0.80)
    assert p_e == pytest.approx(0.50)
    assert kappa == pytest.approx(0.60, abs=1e-12)


def test_kappa_self_and_shuffled():
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 8, 10_000)
    assert cross_tab_and_kappa(labels, labels).kappa == pytest.approx(1.0)
    assert abs(cross_tab_and_kappa(labels, rng.permutation(labels)).kappa) <= 0.03


def test_kappa_undefined_for_constant_raters():
    t = cross_tab_and_kappa([0, 0, 0], [0, 0, 0])
    assert t.kappa is None and t.p_observed == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=2, max_size=60), st.permutations([0, 1, 2, 3]))
def test_kappa_invariant_under_relabelling(pairs, perm):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    k1 = cross_tab_and_kappa(a, b).kappa
    k2 = cross_tab_and_kappa([perm[x] for x in a], [perm[x] for x in b]).kappa
    if k1 is None:
        assert k2 is None
    else:
        assert k2 == pytest.approx(k1, abs=1e-12)


def test_cross_tab_marginals():
    t = cross_tab_and_kappa(["a", "b", "b", "c"], ["a", "b", "c", "c"])
    assert t.labels == ["a", "b", "c"]
    assert t.counts_a == {"a": 1, "b": 2, "c": 1}
    assert t.counts_b == {"a": 1, "b": 1, "c": 2}
    assert sum(t.percent_a.values()) == pytest.approx(100.0)
    assert t.n == 4
    with pytest.raises(ValueError):
        cross_tab_and_kappa([1, 2], [1])
