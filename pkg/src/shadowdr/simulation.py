"""Synthetic data with a valid shadow variable, ground truth, and the Monte
Carlo study harness.

Data are generated through the odds-ratio factorisation so that every working
model can be exactly correct at once:

* ``x ~ N(0, I_p)``;
* baseline propensity ``logit pr(r=1 | y=0, x) = c0 + c^T x + c_q x1^2``;
* complete-case outcome
  ``y | r=1, x ~ N(a0 + a^T x + a_q x1^2 + a_extra x_k^2, sigma^2)`` with
  ``k = extra_covariate`` (default 2);
* odds ratio ``OR(y | x) = gamma y`` with ``gamma = -c_y``, hence
  ``logit pr(r=1 | y, x) = c0 + c^T x + c_q x1^2 + c_y y`` exactly;
* shadow ``z = b_y y + b^T x + b_q x1^2 + N(0, tau^2)`` for everyone, so
  ``z`` is independent of ``r`` given ``(y, x)``.  The fitted ``z | y, x``
  regression shares the outcome design, so a misspecified outcome model also
  drops ``b_q x1^2``.

Integrating ``y`` out gives ``pr(r=1 | x) = expit{u(x)}`` with
``u = c0 + c^T x + c_q x1^2 - gamma m(x) - gamma^2 sigma^2 / 2``, and
incomplete cases follow the tilted law ``N(m(x) + gamma sigma^2, sigma^2)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .data import Dataset
from .errors import ConfigError, OracleInconsistencyError, ShadowError
from .terms import Design, Term

log = logging.getLogger(__name__)

ESTIMATORS = ("mu_reg", "mu1", "mu2", "mu3")
RESPONSE_RATE_RANGE = (0.4, 0.9)


@dataclass(frozen=True)
class ScenarioConfig:
    """Data-generating process plus which working models to misspecify.

    A misspecified model is fitted without the ``x1^2`` term that the DGP
    contains; a correct one includes it.  The outcome term ``a_extra x_k^2``
    is always modelled and never enters the propensity design.  It keeps the
    fitted ``M0`` out of the span of ``H``: otherwise the propensity moment
    equations force ``phi_hat = 0`` identically.

    ``b_q`` puts ``x1^2`` into the shadow law.  Without it the shadow
    calibration equation cancels most of the bias when both working models
    are wrong.  ``g = "m0"`` extends the weights along the centred fitted
    outcome mean, which gives the extension moment a unique root.
    """

    name: str = "default"
    n: int = 2000
    p: int = 2
    a0: float = 1.0
    a: tuple[float, ...] = (1.0, 0.5)
    a_q: float = 0.5
    a_extra: float = 0.5
    extra_covariate: int = 2
    sigma: float = 1.0
    b_y: float = 1.0
    b: tuple[float, ...] = (0.5, 0.0)
    b_q: float = 0.5
    tau: float = 0.5
    c0: float = 2.0
    c: tuple[float, ...] = (0.1, -0.1)
    c_q: float = -0.3
    c_y: float = -0.2
    misspecify_outcome: bool = False
    misspecify_propensity: bool = False
    g: str = "m0"
    q: str = "1"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        object.__setattr__(self, "c", tuple(float(v) for v in self.c))
        if self.p < 1:
            raise ConfigError("p must be at least 1 (the x1^2 terms need a covariate)")
        if not (len(self.a) == len(self.b) == len(self.c) == self.p):
            raise ConfigError("a, b and c must each have length p")
        if not 1 <= self.extra_covariate <= self.p:
            raise ConfigError("extra_covariate must index a covariate (1-based)")
        if self.extra_covariate == 1 and self.a_extra != 0:
            raise ConfigError("the always-modelled extra term cannot sit on x1")
        if self.n < 1:
            raise ConfigError("n must be positive")
        if not (self.sigma > 0 and self.tau > 0):
            raise ConfigError("sigma and tau must be positive")
        if self.b_y == 0:
            raise ConfigError("b_y = 0 makes z irrelevant for y (not a shadow variable)")
        vals = [self.a0, self.a_q, self.a_extra, self.sigma, self.b_y, self.b_q, self.tau, self.c0, self.c_q, self.c_y, *self.a, *self.b, *self.c]
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError("scenario parameters must be finite")
        lo, hi = RESPONSE_RATE_RANGE
        rate = response_rate(self)
        if not lo <= rate <= hi:
            raise ConfigError(f"marginal response rate {rate:.3f} outside [{lo}, {hi}]")

    @property
    def gamma(self) -> float:
        return -self.c_y

    def dgp_key(self) -> tuple:
        return (
            self.p, self.a0, self.a, self.a_q, self.a_extra, self.extra_covariate,
            self.sigma, self.b_y, self.b, self.tau, self.c0, self.c, self.c_q, self.c_y, self.b_q,
        )

    def pipeline(self):
        """Working-model configuration implied by the misspecification flags."""
        from .estimators import PipelineConfig
        from .estimation import MomentBasisSpec

        linear = [Term(((j, 1),)) for j in range(self.p)]
        sq1 = Term(((0, 2),))
        extra = [Term(((self.extra_covariate - 1, 2),))] if self.a_extra != 0 else []
        outcome = Design(tuple(linear + extra + ([] if self.misspecify_outcome else [sq1])))
        prop = Design(tuple(linear + ([] if self.misspecify_propensity else [sq1])))
        basis = MomentBasisSpec(propensity_design=prop, g=self.g, q=self.q)
        return PipelineConfig(basis=basis, outcome_design=outcome)

    def exact_limits(self, fitted):
        """Replace the components of ``fitted`` (a ``WorkingModels``) whose
        working model is correct by the DGP's own parameters.

        A correctly specified model's probability limit is the truth; ``gamma``
        is exact whenever either baseline model is correct.
        """
        from .models import BaselineOutcomeSpec, BaselinePropensitySpec, OddsRatioSpec

        pipe = self.pipeline()
        alpha, beta, gamma = fitted.alpha, fitted.beta, fitted.gamma
        if not self.misspecify_propensity:
            alpha = BaselinePropensitySpec([self.c0, *self.c, self.c_q], pipe.basis.propensity_design)
        if not self.misspecify_outcome:
            extra = [self.a_extra] if self.a_extra != 0 else []
            zextra = [0.0] if self.a_extra != 0 else []
            beta = BaselineOutcomeSpec(
                [self.a0, *self.a, *extra, self.a_q], self.sigma,
                self.b_y, [0.0, *self.b, *zextra, self.b_q], self.tau, pipe.outcome_design,
            )
        if not (self.misspecify_outcome and self.misspecify_propensity):
            gamma = OddsRatioSpec([self.gamma], gamma.basis)
        return replace(fitted, alpha=alpha, beta=beta, gamma=gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("a", "b", "c"):
            d[k] = list(d[k])
        return d


def scenario_from_dict(d: dict) -> ScenarioConfig:
    known = {f.name for f in fields(ScenarioConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    d = dict(d)
    for k in ("a", "b", "c"):
        if k in d:
            d[k] = tuple(d[k])
    return ScenarioConfig(**d)


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True, eq=False)
class OracleDraw:
    """Observed data plus the full outcome vector, kept apart from estimators."""

    data: Dataset
    y_full: np.ndarray


def _index_parts(cfg: ScenarioConfig, x: np.ndarray):
    a = np.asarray(cfg.a)
    c = np.asarray(cfg.c)
    m = cfg.a0 + x @ a + cfg.a_q * x[:, 0] ** 2 + cfg.a_extra * x[:, cfg.extra_covariate - 1] ** 2
    lin0 = cfg.c0 + x @ c + cfg.c_q * x[:, 0] ** 2
    return m, lin0


def simulate(cfg: ScenarioConfig, rng: np.random.Generator, n: int | None = None) -> OracleDraw:
    n = cfg.n if n is None else n
    g = cfg.gamma
    x = rng.standard_normal((n, cfg.p))
    m, lin0 = _index_parts(cfg, x)
    u = lin0 - g * m - 0.5 * (g * cfg.sigma) ** 2
    r = (rng.random(n) < expit(u)).astype(np.int8)
    y = m + (1 - r) * g * cfg.sigma**2 + cfg.sigma * rng.standard_normal(n)
    z = cfg.b_y * y + x @ np.asarray(cfg.b) + cfg.b_q * x[:, 0] ** 2 + cfg.tau * rng.standard_normal(n)
    data = Dataset(x, z, r, np.where(r == 1, y, np.nan))
    return OracleDraw(data, y)


def generate_dataset(cfg: ScenarioConfig, seed: int | None = None) -> Dataset:
    """Observed dataset for ``cfg``; ``seed`` defaults to ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return simulate(cfg, rng).data


# ---------------------------------------------------------------------------
# ground truth


@lru_cache(maxsize=256)
def _response_integral(key: tuple, nodes: int = 96) -> float:
    """``E_x[expit{u(x)}]`` by tensor Gauss-Hermite.

    ``u`` is quadratic in ``x1`` and ``x_k`` and linear in the remaining
    covariates, which enter only through ``v = k_rest^T x_rest ~ N(0, s^2)``;
    the rule runs over ``x1``, ``x_k`` (if different) and ``v``.
    """
    p, a0, a, a_q, a_extra, kq, sigma, _, _, _, c0, c, c_q, c_y, _ = key
    t, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    g = -c_y
    k = np.asarray(c) - g * np.asarray(a)
    special = sorted({0, kq - 1})
    rest = [j for j in range(p) if j not in special]
    s = float(np.sqrt(np.sum(k[rest] ** 2))) if rest else 0.0
    dims = len(special) + (1 if s > 0 else 0)
    grids = np.meshgrid(*([t] * dims), indexing="ij")
    wts = np.ones_like(grids[0])
    for i in range(dims):
        wts = wts * w.reshape([-1 if j == i else 1 for j in range(dims)])
    coord = dict(zip(special, grids))
    u = c0 - g * a0 - 0.5 * (g * sigma) ** 2 + (c_q - g * a_q) * coord[0] ** 2 - g * a_extra * coord[kq - 1] ** 2
    for j in special:
        u = u + k[j] * coord[j]
    if s > 0:
        u = u + s * grids[-1]
    return float(np.sum(wts * expit(u)))


def response_rate(cfg: ScenarioConfig) -> float:
    """Marginal ``pr(r = 1)``."""
    return _response_integral(cfg.dgp_key())


def analytic_mean(cfg: ScenarioConfig) -> float:
    """``E(Y) = a0 + a_q + a_extra + gamma sigma^2 pr(r = 0)``; the last factor
    is a smooth integral over ``x`` evaluated by tensor Gauss-Hermite."""
    return cfg.a0 + cfg.a_q + cfg.a_extra + cfg.gamma * cfg.sigma**2 * (1.0 - response_rate(cfg))


def monte_carlo_mean(cfg: ScenarioConfig, draws: int = 10**7, seed: int = 8675309, chunk: int = 10**6):
    """Brute-force mean of the simulated full-data outcome and its MC SE."""
    rng = np.random.default_rng(seed)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        y = simulate(cfg, rng, k).y_full
        total += y.sum()
        total_sq += (y**2).sum()
        done += k
    mean = total / draws
    var = total_sq / draws - mean**2
    return mean, math.sqrt(var / draws)


_TRUTH_CACHE: dict[tuple, tuple[float, float, float]] = {}


def _checked_mean(cfg: ScenarioConfig, draws: int) -> tuple[float, float, float]:
    key = (cfg.dgp_key(), draws)
    if key not in _TRUTH_CACHE:
        exact = analytic_mean(cfg)
        mc, se = monte_carlo_mean(cfg, draws)
        if abs(exact - mc) > 4 * se:
            raise OracleInconsistencyError(
                f"analytic mean {exact:.6f} and Monte Carlo mean {mc:.6f} differ by more than 4 SE ({se:.2g})"
            )
        _TRUTH_CACHE[key] = (exact, mc, se)
    return _TRUTH_CACHE[key]


def true_mean(cfg: ScenarioConfig, check: bool = True, draws: int = 10**7) -> float:
    """Ground-truth ``E(Y)``; with ``check`` it must match brute-force Monte
    Carlo within 4 standard errors or :class:`OracleInconsistencyError` is raised."""
    return _checked_mean(cfg, draws)[0] if check else analytic_mean(cfg)


def mean_oracle_report(cfg: ScenarioConfig, draws: int = 10**7) -> dict:
    exact, mc, se = _checked_mean(cfg, draws)
    return {"analytic": exact, "monte_carlo": mc, "mc_se": se, "z": (mc - exact) / se}


# ---------------------------------------------------------------------------
# preset scenarios


def acceptance_grid(n: int = 2000, **overrides) -> list[ScenarioConfig]:
    """The four correct/misspecified cells over one DGP."""
    base = ScenarioConfig(n=n, **overrides)
    cells = [
        ("both_correct", False, False),
        ("outcome_correct", False, True),
        ("propensity_correct", True, False),
        ("both_wrong", True, True),
    ]
    return [
        replace(base, name=name, misspecify_outcome=mo, misspecify_propensity=mp, seed=base.seed + i)
        for i, (name, mo, mp) in enumerate(cells)
    ]


def mar_scenario(n: int = 2000, **overrides) -> ScenarioConfig:
    return ScenarioConfig(name="mar", n=n, c_y=0.0, **overrides)


def weak_proxy_scenario(n: int = 2000, **overrides) -> ScenarioConfig:
    return ScenarioConfig(name="weak_proxy", n=n, b_y=0.2, **overrides)


def high_variability_scenario(n: int = 2000, **overrides) -> ScenarioConfig:
    """Response probability drops to roughly 0.15 for large ``|x1|``."""
    params = dict(name="high_variability", n=n, c0=2.2, c_q=-1.0)
    params.update(overrides)
    return ScenarioConfig(**params)


# ---------------------------------------------------------------------------
# study harness


def replication_seed(master_seed: int, scenario_index: int, replication: int) -> np.random.SeedSequence:
    """Per-replication stream: ``SeedSequence(master_seed, spawn_key=(scenario, rep))``."""
    return np.random.SeedSequence(master_seed, spawn_key=(scenario_index, replication))


def run_replication(cfg: ScenarioConfig, seed: np.random.SeedSequence, bootstrap: int = 0) -> dict:
    """One pipeline run on fresh data; failures are recorded, not raised."""
    from .estimators import estimate
    from .inference import BootstrapConfig, gof_phi, gof_psi, run_inference

    rng = np.random.default_rng(seed)
    data = simulate(cfg, rng).data
    row: dict = {"failed": False, "error": ""}
    try:
        if bootstrap:
            boot_seed = int(seed.spawn(1)[0].generate_state(1, np.uint64)[0])
            report = run_inference(data, cfg.pipeline(), BootstrapConfig(B=bootstrap, seed=boot_seed))
        else:
            report = estimate(data, cfg.pipeline())
    except ShadowError as exc:
        row.update(failed=True, error=f"{type(exc).__name__}: {exc}")
        return row
    row.update({k: getattr(report, k) for k in ESTIMATORS})
    row.update(phi=report.phi_hat, psi=report.psi_hat, response_rate=float(data.r.mean()))
    if bootstrap:
        for k, v in report.se.items():
            row[f"se_{k}"] = v
        row["p_phi"] = gof_phi(report).p_value
        row["p_psi"] = gof_psi(report).p_value
        row["boot_dropped"] = report.bootstrap["n_failed"]
    return row


@dataclass
class StudyResult:
    """Per-replication records and per-scenario summaries."""

    replications: pd.DataFrame
    summary: pd.DataFrame
    truths: dict[str, float]
    n_replications: int
    failures: dict[str, int] = field(default_factory=dict)
    master_seed: int = 0

    def long_format(self) -> pd.DataFrame:
        """(scenario, estimator, replication, estimate) rows for plotting."""
        ok = self.replications[~self.replications["failed"]]
        cols = [c for c in (*ESTIMATORS, "phi", "psi") if c in ok]
        out = ok.melt(id_vars=["scenario", "replication"], value_vars=cols, var_name="estimator", value_name="estimate")
        return out[["scenario", "estimator", "replication", "estimate"]].sort_values(
            ["scenario", "estimator", "replication"], kind="stable"
        ).reset_index(drop=True)

    def cell(self, scenario: str, estimator: str) -> pd.Series:
        s = self.summary
        return s[(s["scenario"] == scenario) & (s["estimator"] == estimator)].iloc[0]


def summarize(reps: pd.DataFrame, truths: dict[str, float]) -> pd.DataFrame:
    rows = []
    for scen, grp in reps.groupby("scenario", sort=False):
        ok = grp[~grp["failed"]]
        n_ok = len(ok)
        for est in (*ESTIMATORS, "phi", "psi"):
            if est not in ok:
                continue
            vals = ok[est].to_numpy(dtype=float)
            target = truths[scen] if est in ESTIMATORS else 0.0
            sd = float(vals.std(ddof=1)) if n_ok > 1 else float("nan")
            row = {
                "scenario": scen,
                "estimator": est,
                "replications": n_ok,
                "failed": int(grp["failed"].sum()),
                "target": target,
                "mean": float(vals.mean()) if n_ok else float("nan"),
                "bias": float(vals.mean() - target) if n_ok else float("nan"),
                "mc_sd": sd,
                "mc_se": sd / math.sqrt(n_ok) if n_ok > 1 else float("nan"),
            }
            row["bias_z"] = row["bias"] / row["mc_se"] if row["mc_se"] > 0 else float("nan")
            se_col = f"se_{est}"
            if se_col in ok:
                se = ok[se_col].to_numpy(dtype=float)
                row["boot_se_mean"] = float(np.nanmean(se))
                if est in ESTIMATORS:
                    row["coverage95"] = float(np.mean(np.abs(vals - target) <= 1.959963984540054 * se))
            p_col = {"phi": "p_phi", "psi": "p_psi"}.get(est)
            if p_col and p_col in ok:
                row["reject05"] = float(np.mean(ok[p_col].to_numpy(dtype=float) < 0.05))
            rows.append(row)
    return pd.DataFrame(rows)


def run_study(
    scenarios: Sequence[ScenarioConfig],
    replications: int,
    seed: int = 0,
    n_jobs: int = 1,
    bootstrap: int = 0,
    check_truth: bool = True,
) -> StudyResult:
    """Run ``replications`` pipeline fits per scenario.

    Replication ``k`` of scenario ``i`` draws from
    :func:`replication_seed` ``(seed, i, k)``, so the result does not depend on
    ``n_jobs`` or scheduling.
    """
    if replications < 2:
        raise ConfigError("a study needs at least 2 replications")
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        raise ConfigError("scenario names must be unique")
    truths = {s.name: true_mean(s, check=check_truth) for s in scenarios}
    jobs = [(i, k) for i in range(len(scenarios)) for k in range(replications)]

    def work(i, k):
        return run_replication(scenarios[i], replication_seed(seed, i, k), bootstrap)

    if n_jobs == 1:
        rows = [work(i, k) for i, k in jobs]
    else:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=n_jobs)(delayed(run_replication)(scenarios[i], replication_seed(seed, i, k), bootstrap) for i, k in jobs)
    for (i, k), row in zip(jobs, rows):
        row["scenario"] = scenarios[i].name
        row["replication"] = k
    reps = pd.DataFrame(rows)
    front = ["scenario", "replication"]
    reps = reps[front + [c for c in reps.columns if c not in front]]
    failures = {name: int(reps.loc[reps["scenario"] == name, "failed"].sum()) for name in names}
    return StudyResult(reps, summarize(reps, truths), truths, replications, failures, seed)
