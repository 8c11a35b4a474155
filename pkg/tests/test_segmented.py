import json
import warnings

import numpy as np
import pytest
from scipy import special, stats

from lungref.segmented import (
    FittedSlrModel,
    _golden_section,
    _hinge_rss,
    fit_slr,
    segment_sd,
    slr_information_criteria,
    slr_lln,
    slr_predict,
    slr_zscore,
)


def _broken(n=5000, psi=18.0, sd=0.0, seed=0, sd_high=None):
    rng = np.random.default_rng(seed)
    age = rng.uniform(5, 80, n)
    mean = 2.0 + 0.3 * age - 0.32 * np.maximum(age - psi, 0.0)
    noise_sd = np.where(age <= psi, sd, sd if sd_high is None else sd_high)
    return age, mean + noise_sd * rng.standard_normal(n)


def test_noiseless_breakpoint_recovered():
    age, y = _broken()
    model = fit_slr({"age": age, "y": y})
    assert model.psi == pytest.approx(18.0, abs=0.05)
    # slopes 0.3 below and -0.02 above
    assert model.coefficients[1] == pytest.approx(0.3, abs=1e-3)
    assert model.coefficients[1] + model.coefficients[2] == pytest.approx(-0.02, abs=1e-3)
    assert model.n_params == 3 + 3


def test_grid_optimality():
    age, y = _broken(sd=0.1, seed=1)
    model = fit_slr({"age": age, "y": y})
    assert model.grid.size == 200
    assert model.grid[0] == pytest.approx(np.percentile(age, 5))
    assert model.grid[-1] == pytest.approx(np.percentile(age, 95))
    assert model.rss <= model.grid_rss.min() + 1e-9
    X0 = np.column_stack([np.ones_like(age), age])
    assert _hinge_rss(X0, age, y, model.psi) == pytest.approx(model.rss, rel=1e-12)


def test_golden_section_finds_parabola_minimum():
    x, fx = _golden_section(lambda t: (t - 1.234) ** 2 + 5.0, 0.0, 3.0, tol=1e-6)
    assert x == pytest.approx(1.234, abs=1e-6)
    assert fx == pytest.approx(5.0, abs=1e-12)


def test_linear_data_gives_negligible_hinge():
    rng = np.random.default_rng(2)
    n = 2000
    age = rng.uniform(5, 80, n)
    y = 1.0 + 0.02 * age + 0.1 * rng.standard_normal(n)
    model = fit_slr({"age": age, "y": y})
    X = np.column_stack([np.ones(n), age, np.maximum(age - model.psi, 0.0)])
    s2 = model.rss / (n - 3)
    se = np.sqrt(s2 * np.linalg.inv(X.T @ X)[2, 2])
    assert abs(model.coefficients[2]) < 2 * se


def test_simple_linear_matches_linregress():
    rng = np.random.default_rng(3)
    age = rng.uniform(5, 80, 500)
    y = 3.0 - 0.01 * age + 0.2 * rng.standard_normal(500)
    model = fit_slr({"age": age, "y": y}, allow_breakpoint=False)
    ref = stats.linregress(age, y)
    assert model.simple_linear and model.psi is None
    assert model.coefficients[0] == pytest.approx(ref.intercept, rel=1e-10)
    assert model.coefficients[1] == pytest.approx(ref.slope, rel=1e-10)
    assert model.sd_low == pytest.approx(np.sqrt(model.rss / (500 - 2)), rel=1e-10)
    assert model.n_params == 3


def test_two_piece_sds_recovered():
    age, y = _broken(n=6000, psi=30.0, sd=0.2, sd_high=0.5, seed=4)
    model = fit_slr({"age": age, "y": y})
    assert model.sd_low == pytest.approx(0.2, rel=0.05)
    assert model.sd_high == pytest.approx(0.5, rel=0.05)
    assert np.array_equal(segment_sd(model, np.array([model.psi, model.psi + 1e-9])), [model.sd_low, model.sd_high])


def test_prediction_continuous_at_breakpoint():
    age, y = _broken(sd=0.1, seed=5)
    model = fit_slr({"age": age, "y": y})
    eps = 1e-9
    p = slr_predict(model, {"age": np.array([model.psi - eps, model.psi, model.psi + eps])})
    assert np.ptp(p) < 1e-8
    # manual dot product with the hinge switched off at psi
    assert p[1] == pytest.approx(model.coefficients[0] + model.coefficients[1] * model.psi, abs=1e-12)


def test_covariates_enter_linearly():
    rng = np.random.default_rng(6)
    n = 3000
    age = rng.uniform(5, 80, n)
    height = rng.normal(165, 10, n)
    y = 1.0 + 0.1 * age - 0.12 * np.maximum(age - 20, 0) + 0.03 * height + 0.05 * rng.standard_normal(n)
    model = fit_slr({"age": age, "height": height, "y": y}, covariates=("height",))
    assert model.coefficients[2] == pytest.approx(0.03, abs=1e-3)
    assert model.psi == pytest.approx(20.0, abs=0.5)


def test_zscore_and_lln():
    age, y = _broken(sd=0.3, seed=7)
    model = fit_slr({"age": age, "y": y})
    cov = {"age": np.array([10.0, 50.0])}
    pred = slr_predict(model, cov)
    assert np.allclose(slr_zscore(pred, model, cov), 0.0)
    assert np.allclose(slr_lln(model, cov, 0.5), pred)
    fake = FittedSlrModel("y", (), np.array([4.0, 0.0]), None, 0.5, 0.5, 100, 0, True, 1.0)
    assert slr_lln(fake, {"age": np.array([40.0])}, 0.05)[0] == pytest.approx(4.0 + 0.5 * special.ndtri(0.05), abs=1e-9)
    assert slr_lln(fake, {"age": np.array([40.0])}, 0.05)[0] == pytest.approx(3.17755, abs=5e-5)


def test_zscores_normal_on_own_model_data():
    age, y = _broken(n=4000, sd=0.2, seed=8)
    model = fit_slr({"age": age, "y": y})
    assert stats.kstest(slr_zscore(y, model, {"age": age}), "norm").pvalue > 0.01


def test_fallback_when_segment_too_small():
    rng = np.random.default_rng(9)
    n = 60
    age = np.sort(rng.uniform(5, 80, n))
    # sharp kink among the youngest few rows pushes the breakpoint to the grid edge
    y = np.where(age <= age[2], 10.0 - age, 0.01 * age) + 0.001 * rng.standard_normal(n)
    with pytest.warns(UserWarning, match="simple linear"):
        model = fit_slr({"age": age, "y": y})
    assert model.simple_linear and model.psi is None
    assert model.n_params == 3


def test_too_few_rows_rejected():
    with pytest.raises(ValueError):
        fit_slr({"age": np.arange(10.0), "y": np.arange(10.0)})


def test_information_criteria_normal_deviance():
    age, y = _broken(n=1000, sd=0.2, seed=10)
    model = fit_slr({"age": age, "y": y})
    ic = slr_information_criteria(model, {"age": age, "y": y})
    sd = segment_sd(model, age)
    dev = -2 * np.sum(stats.norm.logpdf(y, slr_predict(model, {"age": age}), sd))
    assert ic["global_deviance"] == pytest.approx(dev, rel=1e-12)
    assert ic["bic"] == pytest.approx(dev + np.log(1000) * model.n_params, rel=1e-12)


def test_serialisation_round_trip():
    age, y = _broken(sd=0.1, seed=11)
    model = fit_slr({"age": age, "y": y})
    back = FittedSlrModel.from_dict(json.loads(json.dumps(model.to_dict())))
    grid = {"age": np.linspace(5, 80, 33)}
    assert np.array_equal(slr_predict(model, grid), slr_predict(back, grid))
    assert back.n_params == model.n_params
