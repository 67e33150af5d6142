import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shadowdr.data import Dataset
from shadowdr.errors import NoDataError
from shadowdr.estimation import fit_beta
from shadowdr.estimators import (
    PipelineConfig,
    bias1_population,
    estimate,
    mar_estimators,
    mu1,
    mu2,
    mu3,
    mu_reg,
)
from shadowdr.models import (
    BaselineOutcomeSpec,
    BaselinePropensitySpec,
    CenteredOutcomeMean,
    ExtendedOutcomeSpec,
    ExtendedWeightSpec,
    OddsRatioSpec,
    tilted_mean_y,
    weight_from_logit,
    response_logit,
)
from shadowdr.simulation import acceptance_grid, generate_dataset, mar_scenario
from shadowdr.terms import Term

finite = st.floats(-1e3, 1e3, allow_nan=False)


def _random_dataset(rng, n, p, frac_missing=0.4):
    x = rng.standard_normal((n, p))
    r = (rng.random(n) > frac_missing).astype(int)
    y = np.where(r == 1, rng.standard_normal(n) * 3 + 1, np.nan)
    return Dataset(x, rng.standard_normal(n), r, y)


def _beta(p, rng):
    return BaselineOutcomeSpec(rng.standard_normal(p + 1), 1.0, 1.0, np.zeros(p + 1), 0.5)


# --- mu_reg, mu1, mu3 ----------------------------------------------------------


def test_complete_data_gives_sample_mean(rng):
    x = rng.standard_normal((50, 2))
    y = rng.standard_normal(50)
    data = Dataset(x, rng.standard_normal(50), np.ones(50, int), y)
    beta = _beta(2, rng)
    gamma = OddsRatioSpec([0.7])
    alpha = BaselinePropensitySpec([0.1, 0.2, -0.3])
    ybar = y.mean()
    assert mu_reg(data, beta, gamma) == pytest.approx(ybar, abs=1e-14)
    assert mu3(data, ExtendedOutcomeSpec(0.4), beta, gamma) == pytest.approx(ybar, abs=1e-14)
    report = estimate(data)
    assert report.diagnostics["complete_data"]
    for v in (report.mu_reg, report.mu1, report.mu2, report.mu3):
        assert v == pytest.approx(ybar, abs=1e-14)
    assert np.isnan(report.phi_hat) and np.isnan(report.psi_hat)


def test_mu1_with_unit_weights_is_sample_mean(rng):
    # alpha -> +inf makes W -> 1: the residual correction is then exact
    x = rng.standard_normal((40, 1))
    y = rng.standard_normal(40)
    data = Dataset(x, rng.standard_normal(40), np.ones(40, int), y)
    alpha = BaselinePropensitySpec([60.0, 0.0])
    assert mu1(data, alpha, _beta(1, rng), OddsRatioSpec([0.0])) == pytest.approx(y.mean(), abs=1e-12)


def test_mu_reg_with_null_odds_ratio_is_regression_imputation(rng):
    data = _random_dataset(rng, 300, 2)
    beta = _beta(2, rng)
    m = beta.mean_y(data.x)
    expected = np.mean(np.where(data.observed, data.y_filled, m))
    assert mu_reg(data, beta, OddsRatioSpec([0.0])) == pytest.approx(expected, abs=1e-14)


def test_mu3_at_zero_extension_equals_mu_reg(rng):
    data = _random_dataset(rng, 300, 2)
    beta = _beta(2, rng)
    gamma = OddsRatioSpec([0.3])
    assert mu3(data, ExtendedOutcomeSpec(0.0), beta, gamma) == mu_reg(data, beta, gamma)


def test_mu1_decomposition_identity(rng):
    data = _random_dataset(rng, 400, 2)
    beta = _beta(2, rng)
    gamma = OddsRatioSpec([0.4])
    alpha = BaselinePropensitySpec([0.3, -0.2, 0.5])
    obs = data.observed
    m0 = tilted_mean_y(data.x, beta, gamma)
    w = weight_from_logit(response_logit(alpha.linear_predictor(data.x[obs]), gamma(data.y[obs], data.x[obs])))
    wr = np.zeros(data.n)
    wr[obs] = w
    resid = np.where(obs, data.y_filled - m0, 0.0)
    # mu1 = mu_reg + E_hat[(W r - 1) r (y - M0)]
    expected = mu_reg(data, beta, gamma) + np.mean((wr - 1.0) * resid)
    assert mu1(data, alpha, beta, gamma) == pytest.approx(expected, abs=1e-13)


# --- mu2 ---------------------------------------------------------------------


def test_mu2_single_complete_case():
    x = np.array([[0.3], [1.0], [-2.0]])
    data = Dataset(x, np.zeros(3), [0, 1, 0], [np.nan, 4.25, np.nan])
    phi = ExtendedWeightSpec(2.0, Term.parse("x1"))
    assert mu2(data, phi, BaselinePropensitySpec([0.0, 1.0]), None, OddsRatioSpec([0.5])) == 4.25


def test_mu2_no_complete_cases():
    data = Dataset(np.zeros((3, 1)), np.zeros(3), [0, 0, 0], [np.nan] * 3)
    with pytest.raises(NoDataError):
        mu2(data, ExtendedWeightSpec(0.0, Term.parse("x1")), BaselinePropensitySpec([0.0, 0.0]), None, OddsRatioSpec([0.0]))


@settings(max_examples=300)
@given(
    seed=st.integers(0, 2**32 - 1),
    n=st.integers(1, 60),
    alpha=st.lists(st.floats(-50, 50), min_size=3, max_size=3),
    gamma=st.floats(-20, 20),
    phi=st.one_of(st.floats(-1e3, 1e3), st.sampled_from([-1e300, 1e300, 0.0])),
    scale=st.floats(1e-3, 1e4),
)
def test_mu2_bounded_by_observed_range(seed, n, alpha, gamma, phi, scale):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 2)) * 3
    r = rng.integers(0, 2, n)
    r[rng.integers(n)] = 1
    y = np.where(r == 1, rng.standard_normal(n) * scale, np.nan)
    data = Dataset(x, rng.standard_normal(n), r, y)
    value = mu2(data, ExtendedWeightSpec(phi, Term.parse("x1")), BaselinePropensitySpec(alpha), None, OddsRatioSpec([gamma]))
    yo = y[r == 1]
    assert yo.min() <= value <= yo.max()


def test_mu2_reports_weight_mass(rng):
    data = _random_dataset(rng, 200, 1)
    phi = ExtendedWeightSpec(0.0, Term.parse("x1"))
    alpha = BaselinePropensitySpec([0.5, 0.0])
    _, mass = mu2(data, phi, alpha, None, OddsRatioSpec([0.0]), return_mass=True)
    assert mass == pytest.approx(data.n_complete / data.n * (1 + np.exp(-0.5)), rel=1e-12)


# --- pipeline ----------------------------------------------------------------


def test_estimate_report_contents():
    cfg = acceptance_grid(2000)[0]
    report = estimate(generate_dataset(cfg, 3), cfg.pipeline())
    d = report.to_dict()
    for k in ("mu_reg", "mu1", "mu2", "mu3", "phi_hat", "psi_hat", "alpha", "gamma", "beta", "diagnostics"):
        assert k in d
    assert d["diagnostics"]["fit_alpha_gamma"]["converged"]
    assert report.diagnostics["extended_weight_mass"] > 0
    y = generate_dataset(cfg, 3).y
    assert np.nanmin(y) <= report.mu2 <= np.nanmax(y)
    assert report.statistic_vector().shape == (len(report.STATISTICS),)


def test_constant_outcome_extension_reproduces_mu1():
    # mu3 - mu1 = -psi E_hat[(W r - 1) q], which the calibration equations
    # annihilate whenever q lies in the span of H(x)
    cfg = acceptance_grid(2000)[1]
    data = generate_dataset(cfg, 8)
    report = estimate(data, cfg.pipeline())
    assert report.mu3 == pytest.approx(report.mu1, abs=1e-9)
    assert estimate(data, acceptance_grid(2000, q="x1")[1].pipeline()).mu3 == pytest.approx(report.mu1, abs=1e-9)
    varying = acceptance_grid(2000, q="x2^2")[1]
    other = estimate(data, varying.pipeline())
    assert other.mu1 == report.mu1
    assert abs(other.mu3 - other.mu1) > 1e-6


def test_mu3_range_flag_reported():
    cfg = acceptance_grid(2000)[0]
    report = estimate(generate_dataset(cfg, 4), cfg.pipeline())
    assert report.diagnostics["mu3_in_observed_range"] in (True, False)


@pytest.mark.parametrize("g_name", ["x1", "m0"])
@pytest.mark.parametrize("seed", range(5))
def test_mar_reduction_identity(seed, g_name):
    cfg = mar_scenario(1500, g=g_name)
    data = generate_dataset(cfg, seed)
    pipe = cfg.pipeline()
    pipe = PipelineConfig(pipe.basis, pipe.outcome_design, pipe.solver, pin_gamma=True)
    report = estimate(data, pipe)
    m = report.models
    assert np.all(m.gamma.gamma == 0.0)
    g = Term.parse("x1") if g_name == "x1" else CenteredOutcomeMean(m.beta, m.gamma, report.mu_reg)
    mars = mar_estimators(data, m.alpha, m.beta, g=g, q=Term())
    np.testing.assert_allclose([report.mu1, report.mu2, report.mu3], mars, rtol=0, atol=1e-10)


def test_mar_estimators_complete_data(rng):
    x = rng.standard_normal((30, 1))
    y = rng.standard_normal(30)
    data = Dataset(x, y + rng.standard_normal(30), np.ones(30, int), y)
    beta = fit_beta(data)
    out = mar_estimators(data, BaselinePropensitySpec([40.0, 0.0]), beta)
    np.testing.assert_allclose(out, y.mean(), atol=1e-14)


# --- asymptotic bias ---------------------------------------------------------


@pytest.mark.slow
@pytest.mark.parametrize("cell, biased", [(0, False), (1, False), (3, True)])
def test_bias1_population(cell, biased):
    cfg = acceptance_grid(2000)[cell]
    value, se = bias1_population(cfg, n_fit=300_000, n_draws=1_000_000, seed=cell)
    if biased:
        assert abs(value) > 3 * se
    else:
        assert abs(value) <= 3 * se
