"""Nonparametric bootstrap over the whole pipeline and the goodness-of-fit
tests of ``phi = 0`` (baseline propensity) and ``psi = 0`` (baseline outcome)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import Dataset
from .errors import (
    ConfigError,
    DegenerateWeightsError,
    InferenceUnreliableError,
    ShadowError,
    UndefinedStatisticError,
)
from .estimators import EstimateReport, PipelineConfig, estimate

log = logging.getLogger(__name__)

STATISTICS = EstimateReport.STATISTICS


@dataclass(frozen=True)
class BootstrapConfig:
    """``B`` resamples; resample ``b`` uses child ``b`` of ``SeedSequence(seed)``."""

    B: int = 200
    seed: int = 0
    max_failure_fraction: float = 0.5

    def __post_init__(self):
        if self.B < 2:
            raise ConfigError("the bootstrap needs B >= 2")


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    se: dict[str, float]
    draws: np.ndarray  # (n_ok, len(STATISTICS))
    n_ok: int
    n_failed: int

    @property
    def dropped_fraction(self) -> float:
        return self.n_failed / (self.n_ok + self.n_failed)


@dataclass(frozen=True)
class GofTestResult:
    parameter: str
    estimate: float
    se: float
    statistic: float
    p_value: float

    def rejects(self, level: float = 0.05) -> bool:
        return self.p_value < level


def _resample_indices(seed: np.random.SeedSequence, n: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, n, size=n)


def _one_resample(data: Dataset, config: PipelineConfig, seed, init):
    idx = _resample_indices(seed, data.n)
    try:
        return estimate(data.take(idx), config, init=init).statistic_vector()
    except ShadowError as exc:
        log.debug("bootstrap resample failed: %s", exc)
        return None


def bootstrap_ses(
    data: Dataset,
    config: PipelineConfig = PipelineConfig(),
    boot: BootstrapConfig = BootstrapConfig(),
    reference: EstimateReport | None = None,
    n_jobs: int = 1,
) -> BootstrapResult:
    """Standard deviations of the pipeline statistics across resamples.

    Resamples whose fits fail are dropped and counted; more than
    ``max_failure_fraction`` failures raise :class:`InferenceUnreliableError`.
    Each refit starts the ``(alpha, gamma)`` solver from ``reference`` (the
    full-sample fit) when given.
    """
    init = None if reference is None else reference.theta_alpha_gamma
    children = np.random.SeedSequence(boot.seed).spawn(boot.B)
    if n_jobs == 1:
        out = [_one_resample(data, config, s, init) for s in children]
    else:
        from joblib import Parallel, delayed

        out = Parallel(n_jobs=n_jobs)(delayed(_one_resample)(data, config, s, init) for s in children)
    ok = [v for v in out if v is not None]
    n_failed = boot.B - len(ok)
    if n_failed > boot.max_failure_fraction * boot.B or len(ok) < 2:
        raise InferenceUnreliableError(f"{n_failed} of {boot.B} bootstrap resamples failed")
    draws = np.vstack(ok)
    with np.errstate(invalid="ignore"):
        sd = [
            float(np.std(col[np.isfinite(col)], ddof=1)) if np.isfinite(col).sum() > 1 else float("nan")
            for col in draws.T
        ]
    return BootstrapResult(dict(zip(STATISTICS, sd)), draws, len(ok), n_failed)


def wald_test(parameter: str, estimate: float, se: float) -> GofTestResult:
    """Two-sided test of ``parameter = 0`` against a normal reference."""
    if not (se > 0) or not math.isfinite(se):
        raise UndefinedStatisticError(f"standard error of {parameter} is {se}; statistic undefined")
    if estimate == 0.0:
        return GofTestResult(parameter, 0.0, se, 0.0, 1.0)
    stat = estimate / se
    p = float(min(1.0, 2.0 * norm.sf(abs(stat))))
    return GofTestResult(parameter, estimate, se, stat, p)


def _gof(report: EstimateReport, name: str, value: float) -> GofTestResult:
    if report.diagnostics.get("complete_data") or not math.isfinite(value):
        raise DegenerateWeightsError(f"{name} is not estimable: every outcome is observed")
    if report.se is None:
        raise ConfigError("report has no bootstrap standard errors; use run_inference")
    return wald_test(name, value, report.se[name])


def gof_phi(report: EstimateReport) -> GofTestResult:
    """Test of the baseline propensity model via ``H0: phi = 0``."""
    return _gof(report, "phi", report.phi_hat)


def gof_psi(report: EstimateReport) -> GofTestResult:
    """Test of the baseline outcome model via ``H0: psi = 0``."""
    return _gof(report, "psi", report.psi_hat)


def run_inference(
    data: Dataset,
    config: PipelineConfig = PipelineConfig(),
    boot: BootstrapConfig = BootstrapConfig(),
    n_jobs: int = 1,
) -> EstimateReport:
    """Point estimates plus bootstrap standard errors."""
    report = estimate(data, config)
    res = bootstrap_ses(data, config, boot, reference=report, n_jobs=n_jobs)
    report.se = res.se
    report.bootstrap = {"B": boot.B, "seed": boot.seed, "n_ok": res.n_ok, "n_failed": res.n_failed}
    return report
