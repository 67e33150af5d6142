import dataclasses

import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm
from scipy.special import expit

from shadowdr import simulation as sim
from shadowdr.data import Dataset
from shadowdr.errors import ConfigError, OracleInconsistencyError
from shadowdr.estimators import estimate
from shadowdr.simulation import (
    ScenarioConfig,
    acceptance_grid,
    analytic_mean,
    generate_dataset,
    high_variability_scenario,
    mar_scenario,
    monte_carlo_mean,
    response_rate,
    run_study,
    scenario_from_dict,
    simulate,
    true_mean,
    weak_proxy_scenario,
)


# --- configuration -------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(p=0, a=(), b=(), c=()),
        dict(a=(1.0,)),
        dict(b_y=0.0),
        dict(sigma=0.0),
        dict(tau=-1.0),
        dict(n=0),
        dict(c0=-6.0),
        dict(c0=8.0),
        dict(extra_covariate=3),
        dict(extra_covariate=1),
        dict(a0=float("nan")),
    ],
)
def test_invalid_scenarios(kwargs):
    with pytest.raises(ConfigError):
        ScenarioConfig(**kwargs)


def test_scenario_from_dict_round_trip():
    cfg = ScenarioConfig(name="x", a=(0.3, 0.2), seed=4)
    assert scenario_from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        scenario_from_dict({"nonsense": 1})


def test_default_response_rate_in_range():
    for cfg in (ScenarioConfig(), mar_scenario(), weak_proxy_scenario(), high_variability_scenario(), *acceptance_grid()):
        assert 0.4 <= response_rate(cfg) <= 0.9


def test_acceptance_grid_cells():
    grid = acceptance_grid(500)
    assert [c.name for c in grid] == ["both_correct", "outcome_correct", "propensity_correct", "both_wrong"]
    assert [(c.misspecify_outcome, c.misspecify_propensity) for c in grid] == [
        (False, False), (False, True), (True, False), (True, True)
    ]
    sq = "x1^2"
    for c in grid:
        pipe = c.pipeline()
        assert (sq in pipe.outcome_design.names()) != c.misspecify_outcome
        assert (sq in pipe.basis.propensity_design.names()) != c.misspecify_propensity


# --- generation ----------------------------------------------------------------


def test_dataset_is_byte_identical_for_a_seed():
    cfg = ScenarioConfig(n=300)
    a, b = generate_dataset(cfg, 9), generate_dataset(cfg, 9)
    for u, v in ((a.x, b.x), (a.z, b.z), (a.r, b.r), (a.y, b.y)):
        assert u.tobytes() == v.tobytes()
    assert generate_dataset(cfg, 10).z.tobytes() != a.z.tobytes()


def test_oracle_outcome_is_kept_apart():
    draw = simulate(ScenarioConfig(n=500), np.random.default_rng(1))
    data = draw.data
    assert isinstance(data, Dataset)
    assert np.all(np.isnan(data.y[data.r == 0]))
    np.testing.assert_array_equal(data.y[data.r == 1], draw.y_full[data.r == 1])
    assert not any(np.isnan(draw.y_full))
    assert not hasattr(data, "y_full")
    # estimators see only (x, z, r, y r): replacing the hidden outcomes changes nothing
    other = dataclasses.replace(draw, y_full=draw.y_full + 100.0)
    assert estimate(draw.data).mu1 == estimate(other.data).mu1


def test_mar_data_recover_the_logistic_truth():
    cfg = mar_scenario(100_000)
    data = generate_dataset(cfg, 2)
    X = np.column_stack([np.ones(data.n), data.x, data.x[:, 0] ** 2])
    fit = sm.Logit(data.r.astype(float), X).fit(disp=0)
    truth = np.array([cfg.c0, *cfg.c, cfg.c_q])
    z = (np.asarray(fit.params) - truth) / np.asarray(fit.bse)
    assert np.all(np.abs(z) < 3)


def test_shadow_independent_of_response_given_outcome_and_covariates():
    cfg = ScenarioConfig()
    draw = simulate(cfg, np.random.default_rng(3), 200_000)
    d = draw.data
    X = np.column_stack([np.ones(d.n), draw.y_full, d.x, d.x[:, 0] ** 2, d.r])
    fit = sm.OLS(d.z, X).fit()
    assert abs(fit.tvalues[-1]) < 3
    # while the outcome itself does depend on r (MNAR)
    Xy = np.column_stack([np.ones(d.n), d.x, d.x[:, 0] ** 2, d.x[:, 1] ** 2, d.r])
    assert abs(sm.OLS(draw.y_full, Xy).fit().tvalues[-1]) > 10


def test_complete_case_outcome_law():
    cfg = ScenarioConfig()
    draw = simulate(cfg, np.random.default_rng(4), 200_000)
    d = draw.data
    obs = d.observed
    x = d.x[obs]
    m = cfg.a0 + x @ np.array(cfg.a) + cfg.a_q * x[:, 0] ** 2 + cfg.a_extra * x[:, 1] ** 2
    resid = d.y[obs] - m
    assert abs(resid.mean()) < 3 * resid.std() / np.sqrt(resid.size)
    assert resid.std() == pytest.approx(cfg.sigma, rel=0.01)


# --- ground truth --------------------------------------------------------------


def test_truth_constant_mean():
    cfg = mar_scenario(a0=1.7, a=(0.0, 0.0), a_q=0.0, a_extra=0.0)
    assert analytic_mean(cfg) == pytest.approx(1.7, abs=1e-14)


def test_truth_quadratic_mean():
    cfg = mar_scenario(a0=0.0, a=(0.0, 0.0), a_q=1.0, a_extra=0.0)
    assert analytic_mean(cfg) == pytest.approx(1.0, abs=1e-14)


def test_response_rate_matches_simulation():
    cfg = ScenarioConfig(p=3, a=(0.5, 0.2, -0.4), b=(0.1, 0.0, 0.3), c=(0.3, -0.2, 0.4), extra_covariate=3)
    r = simulate(cfg, np.random.default_rng(5), 1_000_000).data.r
    assert response_rate(cfg) == pytest.approx(r.mean(), abs=4 * np.sqrt(0.25 / r.size))


@pytest.mark.parametrize(
    "cfg",
    [
        ScenarioConfig(),
        high_variability_scenario(),
        ScenarioConfig(p=3, a=(0.5, 0.2, -0.4), b=(0.1, 0.0, 0.3), c=(0.3, -0.2, 0.4), extra_covariate=3, c_y=-0.4),
        ScenarioConfig(p=1, a=(1.0,), b=(0.5,), c=(0.2,), a_extra=0.0, extra_covariate=1, sigma=1.5),
    ],
)
def test_analytic_and_monte_carlo_truth_agree(cfg):
    exact = analytic_mean(cfg)
    mc, se = monte_carlo_mean(cfg, draws=2_000_000, seed=17)
    assert abs(exact - mc) <= 4 * se


def test_oracle_disagreement_raises(monkeypatch):
    cfg = ScenarioConfig(a0=1.2345)
    monkeypatch.setattr(sim, "analytic_mean", lambda c: 99.0)
    with pytest.raises(OracleInconsistencyError):
        true_mean(cfg, draws=100_000)


def test_exact_limits_match_a_large_fit():
    cfg = acceptance_grid(200_000)[0]
    fitted = estimate(generate_dataset(cfg, 6), cfg.pipeline()).models
    exact = cfg.exact_limits(fitted)
    np.testing.assert_allclose(exact.alpha.alpha, fitted.alpha.alpha, atol=0.05)
    np.testing.assert_allclose(exact.beta.beta_y, fitted.beta.beta_y, atol=0.02)
    np.testing.assert_allclose(exact.beta.beta_zx, fitted.beta.beta_zx, atol=0.02)
    np.testing.assert_allclose(exact.gamma.gamma, fitted.gamma.gamma, atol=0.03)
    wrong = acceptance_grid(1000)[3]
    kept = wrong.exact_limits(fitted)
    assert kept.alpha is fitted.alpha and kept.beta is fitted.beta and kept.gamma is fitted.gamma


# --- study harness -------------------------------------------------------------


def test_smoke_study():
    cfg = ScenarioConfig(name="smoke", n=400)
    res = run_study([cfg], 2, seed=1)
    assert res.n_replications == 2
    assert len(res.replications) == 2
    assert res.failures == {"smoke": 0}
    s = res.summary
    assert set(s["estimator"]) == {"mu_reg", "mu1", "mu2", "mu3", "phi", "psi"}
    assert (s["replications"] == 2).all()
    long = res.long_format()
    assert list(long.columns) == ["scenario", "estimator", "replication", "estimate"]
    assert len(long) == 12


def test_study_with_bootstrap_reports_coverage():
    cfg = ScenarioConfig(name="boot", n=400)
    res = run_study([cfg], 3, seed=2, bootstrap=4, check_truth=False)
    s = res.summary.set_index("estimator")
    assert 0.0 <= s.loc["mu1", "coverage95"] <= 1.0
    assert 0.0 <= s.loc["phi", "reject05"] <= 1.0
    assert (s["boot_se_mean"] > 0).all()


def test_study_is_independent_of_parallelism():
    grid = acceptance_grid(300)[:2]
    a = run_study(grid, 3, seed=5, n_jobs=1, check_truth=False)
    b = run_study(grid, 3, seed=5, n_jobs=2, check_truth=False)
    pd.testing.assert_frame_equal(a.replications, b.replications)
    pd.testing.assert_frame_equal(a.summary, b.summary)


def test_study_argument_errors():
    with pytest.raises(ConfigError):
        run_study([ScenarioConfig()], 1)
    with pytest.raises(ConfigError):
        run_study([ScenarioConfig(), ScenarioConfig()], 2)


def test_study_counts_failures():
    # too few complete cases for the outcome design: every replication fails
    cfg = ScenarioConfig(name="tiny", n=5)
    res = run_study([cfg], 3, check_truth=False)
    assert res.failures == {"tiny": 3}
    assert res.replications["error"].str.len().gt(0).all()


# --- high-variability weights ----------------------------------------------------


def test_high_variability_scenario_has_low_response_region():
    cfg = high_variability_scenario()
    x = np.array([[2.5, 0.0]])
    m, lin0 = sim._index_parts(cfg, x)
    u = lin0 - cfg.gamma * m - 0.5 * (cfg.gamma * cfg.sigma) ** 2
    assert expit(u)[0] < 0.2


@pytest.mark.slow
def test_mu2_in_observed_range_under_variable_weights():
    cfg = high_variability_scenario(misspecify_propensity=True)
    for k in range(60):
        data = generate_dataset(cfg, 1000 + k)
        report = estimate(data, cfg.pipeline())
        yo = data.y[data.observed]
        assert yo.min() <= report.mu2 <= yo.max()
