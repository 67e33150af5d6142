"""Outcome-mean estimators and the end-to-end estimation pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, ClassVar

import numpy as np

from .data import Dataset
from .errors import NoDataError
from .estimation import (
    AlphaGammaMoments,
    FitResult,
    MomentBasisSpec,
    SolverConfig,
    extension_direction,
    fit_alpha_gamma,
    fit_beta,
    fit_phi,
    fit_psi,
    scalar_root,
)
from .errors import ConvergenceError, DegenerateExtensionError
from .models import (
    BaselineOutcomeSpec,
    BaselinePropensitySpec,
    ExtendedOutcomeSpec,
    ExtendedWeightSpec,
    OddsRatioSpec,
    log_weight_from_logit,
    response_logit,
    tilted_mean_y,
    weight_from_logit,
)
from .terms import Design, Term, default_g


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to go from a :class:`Dataset` to an estimate."""

    basis: MomentBasisSpec = field(default_factory=MomentBasisSpec)
    outcome_design: Design | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    pin_gamma: bool = False


@dataclass(frozen=True, eq=False)
class WorkingModels:
    """Fitted baseline, odds-ratio and extension models."""

    alpha: BaselinePropensitySpec
    beta: BaselineOutcomeSpec
    gamma: OddsRatioSpec
    phi: ExtendedWeightSpec
    psi: ExtendedOutcomeSpec


@dataclass
class EstimateReport:
    mu_reg: float
    mu1: float
    mu2: float
    mu3: float
    phi_hat: float
    psi_hat: float
    models: WorkingModels | None = None
    diagnostics: dict[str, Any] = field(default_factory=dict)
    se: dict[str, float] | None = None
    bootstrap: dict[str, Any] | None = None

    STATISTICS: ClassVar[tuple[str, ...]] = ("mu_reg", "mu1", "mu2", "mu3", "phi", "psi")

    def statistic_vector(self) -> np.ndarray:
        return np.array([self.mu_reg, self.mu1, self.mu2, self.mu3, self.phi_hat, self.psi_hat])

    @property
    def theta_alpha_gamma(self) -> np.ndarray | None:
        if self.models is None:
            return None
        return np.concatenate([self.models.alpha.alpha, self.models.gamma.gamma])

    def to_dict(self) -> dict:
        out: dict[str, Any] = {k: getattr(self, k) for k in ("mu_reg", "mu1", "mu2", "mu3", "phi_hat", "psi_hat")}
        if self.models is not None:
            m = self.models
            out["alpha"] = m.alpha.alpha.tolist()
            out["gamma"] = m.gamma.gamma.tolist()
            out["beta"] = {
                "beta_y": m.beta.beta_y.tolist(),
                "sigma_y": m.beta.sigma_y,
                "beta_zy": m.beta.beta_zy,
                "beta_zx": m.beta.beta_zx.tolist(),
                "sigma_z": m.beta.sigma_z,
            }
        diag = {}
        for k, v in self.diagnostics.items():
            if isinstance(v, FitResult):
                diag[k] = {
                    "converged": v.converged,
                    "final_moment_norm": v.final_moment_norm,
                    "iterations": v.iterations,
                }
            else:
                diag[k] = v
        out["diagnostics"] = diag
        if self.se is not None:
            out["se"] = dict(self.se)
        if self.bootstrap is not None:
            out["bootstrap"] = dict(self.bootstrap)
        return out


# ---------------------------------------------------------------------------
# estimators


def _observed_weights(data: Dataset, alpha: BaselinePropensitySpec, gamma: OddsRatioSpec, shift=0.0):
    obs = data.observed
    xo = data.x[obs]
    return response_logit(alpha.linear_predictor(xo), gamma(data.y[obs], xo), shift)


def mu_reg(data: Dataset, beta: BaselineOutcomeSpec, gamma: OddsRatioSpec) -> float:
    """Regression imputation ``E_hat{(1 - r) M0(x) + r y}``."""
    m0 = tilted_mean_y(data.x, beta, gamma)
    return float(np.mean(np.where(data.observed, data.y_filled, m0)))


def mu1(data: Dataset, alpha: BaselinePropensitySpec, beta: BaselineOutcomeSpec, gamma: OddsRatioSpec) -> float:
    """Regression with weighted residual correction
    ``E_hat[W r {y - M0(x)} + M0(x)]``."""
    m0 = tilted_mean_y(data.x, beta, gamma)
    obs = data.observed
    w = weight_from_logit(_observed_weights(data, alpha, gamma))
    return float((m0.sum() + w @ (data.y[obs] - m0[obs])) / data.n)


def _hajek(log_w: np.ndarray, y: np.ndarray, n: int) -> tuple[float, float]:
    """Self-normalised weighted mean from log-weights, and ``E_hat{W r}``.

    The mean is clipped to ``[min y, max y]``: the exact value is a convex
    combination, so this only removes last-digit rounding.
    """
    if y.size == 0:
        raise NoDataError("no complete cases")
    top = log_w.max()
    w = np.exp(log_w - top)
    mean = float(w @ y / w.sum())
    mass = float(np.exp(top) * w.sum() / n) if top < 700 else float("inf")
    return min(max(mean, float(y.min())), float(y.max())), mass


def mu2(
    data: Dataset,
    phi: ExtendedWeightSpec,
    alpha: BaselinePropensitySpec,
    beta: BaselineOutcomeSpec | None,
    gamma: OddsRatioSpec,
    return_mass: bool = False,
):
    """Horvitz-Thompson with extended, self-normalised weights.

    Always inside the observed outcome range.  ``beta`` is unused (kept for a
    uniform estimator signature).
    """
    obs = data.observed
    shift = phi.phi * phi.g_values(data.x[obs])
    eta = _observed_weights(data, alpha, gamma, shift)
    value, mass = _hajek(log_weight_from_logit(eta), data.y[obs], data.n)
    return (value, mass) if return_mass else value


def mu3(data: Dataset, psi: ExtendedOutcomeSpec, beta: BaselineOutcomeSpec, gamma: OddsRatioSpec) -> float:
    """Regression with the extended outcome model ``E_hat{(1 - r) M0_ext + r y}``."""
    m0 = tilted_mean_y(data.x, beta, gamma)
    if psi.psi != 0.0:
        m0 = m0 + psi.psi * psi.q_values(data.x)
    return float(np.mean(np.where(data.observed, data.y_filled, m0)))


def mar_estimators(
    data: Dataset,
    alpha: BaselinePropensitySpec,
    beta: BaselineOutcomeSpec,
    g: Term | None = None,
    q: Term | None = None,
    cfg: SolverConfig = SolverConfig(),
) -> tuple[float, float, float]:
    """Missing-at-random versions of the three estimators.

    Written directly in MAR form: ``W(x) = 1 + exp{-D(x) alpha}``,
    ``M(x) = D(x) beta_y``, extended logistic propensity
    ``logit pr_ext = D(x) alpha + phi g(x)``, and extended outcome
    ``M_ext = M + psi q`` with ``psi`` balancing ``E_hat[W r (y - M_ext)]``
    against ``E_hat[r (y - M_ext)]``.  The third estimator is reported as
    ``E_hat{(1 - r) M_ext + r y}``, which equals ``E_hat{M_ext}`` whenever
    ``E_hat[r (y - M_ext)] = 0`` (e.g. ``q`` centred among complete cases).
    With every outcome observed all three are the sample mean.
    """
    if data.n_complete == data.n and data.n > 0:
        ybar = float(np.mean(data.y))
        return ybar, ybar, ybar
    x = data.x
    obs = data.observed
    n = data.n
    g = default_g(data.p) if g is None else g
    q = Term() if q is None else q
    lin = alpha.linear_predictor(x[obs])
    m = beta.mean_y(x)
    y = data.y[obs]
    w = 1.0 + np.exp(-lin)

    mu1_ = float((m.sum() + w @ (y - m[obs])) / n)

    mreg = float(np.mean(np.where(obs, data.y_filled, m)))
    d = m - mreg
    go = g(x[obs])

    def f(phi):
        we = 1.0 + np.exp(-(lin + phi * go))
        return float((we @ d[obs] - d.sum()) / n)

    def df(phi):
        we1 = np.exp(-(lin + phi * go))
        return float(-(we1 * go) @ d[obs] / n)

    fit = scalar_root(f, df, cfg)
    if not fit.converged:
        raise ConvergenceError("MAR phi solver did not converge", fit)
    mu2_, _ = _hajek(np.logaddexp(0.0, -(lin + fit.theta_hat[0] * go)), y, n)

    qo = q(x[obs])
    den = (w - 1.0) @ qo
    if abs(den / n) < 1e-12:
        raise DegenerateExtensionError("MAR outcome-extension denominator is degenerate")
    psi = float((w - 1.0) @ (y - m[obs]) / den)
    m_ext = m + psi * q(x)
    mu3_ = float(np.mean(np.where(obs, data.y_filled, m_ext)))
    return mu1_, mu2_, mu3_


# ---------------------------------------------------------------------------
# pipeline


def _complete_data_report(data: Dataset) -> EstimateReport:
    ybar = float(np.mean(data.y))
    nan = float("nan")
    return EstimateReport(
        ybar, ybar, ybar, ybar, nan, nan,
        diagnostics={"n": data.n, "n_complete": data.n, "complete_data": True},
    )


def estimate(data: Dataset, config: PipelineConfig = PipelineConfig(), init: np.ndarray | None = None) -> EstimateReport:
    """Fit beta, (alpha, gamma), phi and psi, then all four estimators.

    ``init`` overrides the MAR starting value of the ``(alpha, gamma)``
    solver.  With every outcome observed there is nothing to weight: all
    estimators equal the sample mean and ``phi``, ``psi`` are ``nan``.
    """
    if data.n_complete == data.n and data.n > 0:
        return _complete_data_report(data)
    basis = config.basis.resolved(data.p)
    cfg = config.solver
    beta = fit_beta(data, config.outcome_design)
    ag = fit_alpha_gamma(data, beta, basis, cfg, init=init, pin_gamma=config.pin_gamma)
    alpha, gamma = AlphaGammaMoments(data, beta, basis, config.pin_gamma).split(ag.theta_hat)

    mreg = mu_reg(data, beta, gamma)
    phi_fit = fit_phi(data, beta, gamma, alpha, mreg, basis, cfg)
    psi_fit = fit_psi(data, beta, gamma, alpha, basis, cfg)
    phi = ExtendedWeightSpec(float(phi_fit.theta_hat[0]), extension_direction(basis.g, beta, gamma, mreg))
    psi = ExtendedOutcomeSpec(float(psi_fit.theta_hat[0]), basis.q)

    m2, mass = mu2(data, phi, alpha, beta, gamma, return_mass=True)
    m3 = mu3(data, psi, beta, gamma)
    y_obs = data.y[data.observed]
    lo, hi = float(y_obs.min()), float(y_obs.max())
    diagnostics = {
        "n": data.n,
        "n_complete": data.n_complete,
        "complete_data": False,
        "fit_alpha_gamma": ag,
        "fit_phi": phi_fit,
        "fit_psi": psi_fit,
        "extended_weight_mass": mass,
        "mu3_in_observed_range": lo <= m3 <= hi,
    }
    return EstimateReport(
        mu_reg=mreg,
        mu1=mu1(data, alpha, beta, gamma),
        mu2=m2,
        mu3=m3,
        phi_hat=phi.phi,
        psi_hat=psi.psi,
        models=WorkingModels(alpha, beta, gamma, phi, psi),
        diagnostics=diagnostics,
    )


def bias1_population(scenario, limits: WorkingModels | None = None, n_fit: int = 10**6, n_draws: int = 10**6, seed: int = 0):
    """Monte Carlo value of ``E[{W(x, y; alpha*, gamma*) r - 1}{y - M0(x; beta*, gamma*)}]``.

    ``limits`` are probability limits.  By default they come from one fit on
    ``n_fit`` draws, with correctly specified components replaced by the
    DGP's exact parameters (sampling error in a fitted ``gamma`` would
    otherwise leak into the value at first order).  Fresh draws use the
    oracle full-data outcome.  Returns ``(value, mc_se)``.
    """
    from .simulation import simulate

    ss = np.random.SeedSequence(seed)
    fit_seed, eval_seed = ss.spawn(2)
    if limits is None:
        big = simulate(scenario, np.random.default_rng(fit_seed), n_fit).data
        limits = scenario.exact_limits(estimate(big, scenario.pipeline()).models)
    draw = simulate(scenario, np.random.default_rng(eval_seed), n_draws)
    data, y = draw.data, draw.y_full
    x = data.x
    eta = response_logit(limits.alpha.linear_predictor(x), limits.gamma(y, x))
    wr = np.where(data.observed, weight_from_logit(eta), 0.0)
    terms = (wr - 1.0) * (y - tilted_mean_y(x, limits.beta, limits.gamma))
    return float(terms.mean()), float(terms.std(ddof=1) / np.sqrt(terms.size))
