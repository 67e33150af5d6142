"""Estimating equations for the nuisance and extension parameters.

* ``fit_beta``: complete-case Gaussian maximum likelihood (closed form).
* ``fit_alpha_gamma``: calibration equations
  ``E[{W r - 1} (G1^T, H^T)^T] = 0`` with ``G1 = G - E(G | r=0, x)``,
  solved jointly by damped Newton (analytic Jacobian when the odds ratio is
  linear in ``y`` and the shadow terms linear in ``z``, finite differences
  otherwise).
* ``fit_phi``: scalar equation for the extended-weight parameter.
* ``fit_psi``: closed form for the identity-link outcome extension.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateExtensionError,
    NonIdentificationError,
    SampleSizeError,
    SingularDesignError,
    SingularJacobianError,
)
from .models import (
    _ETA_FLOOR,
    BaselineOutcomeSpec,
    CenteredOutcomeMean,
    BaselinePropensitySpec,
    ExtendedOutcomeSpec,
    ExtendedWeightSpec,
    OddsRatioSpec,
    response_logit,
    shadow_conditional_mean,
    tilted_mean_y,
    weight_from_logit,
)
from .terms import Design, Term, default_g, parse_terms, resolve_design

log = logging.getLogger(__name__)

#: declare ``g = "m0"`` to extend the weights along the centred fitted outcome mean
CENTERED_G = "m0"


@dataclass(frozen=True)
class SolverConfig:
    """Newton settings; ``tol`` bounds the max-abs empirical moment."""

    tol: float = 1e-10
    max_iter: int = 100
    max_halvings: int = 30
    fd_step: float = 1e-6
    max_condition: float = 1e12

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: np.ndarray
    converged: bool
    final_moment_norm: float
    iterations: int
    path: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "theta_hat", np.atleast_1d(np.asarray(self.theta_hat, dtype=float)))


@dataclass(frozen=True)
class MomentBasisSpec:
    """Model choices entering the calibration and extension equations.

    ``shadow`` are the ``G(x, z)`` terms (default: the odds-ratio terms with
    ``z`` in place of ``y``), ``propensity_design`` doubles as ``H(x)`` and
    always carries the intercept.  ``g = "m0"`` selects the centred fitted
    outcome mean as extension direction.  ``None`` fields resolve against
    the covariate dimension via :meth:`resolved`.
    """

    odds_ratio: tuple[Term, ...] = field(default_factory=lambda: (Term.parse("y"),))
    shadow: tuple[Term, ...] | None = None
    propensity_design: Design | None = None
    g: Term | str | None = None
    q: Term | None = None

    def __post_init__(self):
        object.__setattr__(self, "odds_ratio", parse_terms(self.odds_ratio))
        # reuse the odds-ratio checks (vanishing at y = 0, no shadow terms)
        OddsRatioSpec(np.zeros(len(self.odds_ratio)), self.odds_ratio)
        if self.shadow is not None:
            object.__setattr__(self, "shadow", parse_terms(self.shadow))
            if len(self.shadow) != len(self.odds_ratio):
                raise ConfigError("dim(G) must equal dim(gamma)")
            for t in self.shadow:
                if t.variable == "y":
                    raise ConfigError(f"shadow term {t} uses the outcome y")
        for name in ("g", "q"):
            v = getattr(self, name)
            if isinstance(v, str) and not (name == "g" and v == CENTERED_G):
                object.__setattr__(self, name, Term.parse(v))
            v = getattr(self, name)
            if isinstance(v, Term) and v.variable is not None:
                raise ConfigError(f"{name}(x) may depend on covariates only")

    def resolved(self, p: int) -> "MomentBasisSpec":
        return replace(
            self,
            shadow=self.shadow if self.shadow is not None else tuple(t.with_variable("z") for t in self.odds_ratio),
            propensity_design=resolve_design(self.propensity_design, p),
            g=self.g if self.g is not None else default_g(p),
            q=self.q if self.q is not None else Term(),
        )


# ---------------------------------------------------------------------------
# generic solvers


def fd_jacobian(fn, theta: np.ndarray, f0: np.ndarray | None = None, step: float = 1e-6, central: bool = False):
    """Finite-difference Jacobian with per-coordinate step ``step * (1 + |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    if f0 is None and not central:
        f0 = fn(theta)
    cols = []
    for j in range(theta.size):
        h = step * (1.0 + abs(theta[j]))
        e = np.zeros_like(theta)
        e[j] = h
        if central:
            cols.append((fn(theta + e) - fn(theta - e)) / (2.0 * h))
        else:
            cols.append((fn(theta + e) - f0) / h)
    return np.column_stack(cols)


def newton_solve(fn, theta0, cfg: SolverConfig = SolverConfig()) -> FitResult:
    """Damped Newton on ``fn(theta) = 0`` with step halving.

    Returns a :class:`FitResult`; ``converged`` is false when the iteration
    budget runs out or no halving reduces the residual.  A (numerically)
    singular Jacobian raises :class:`SingularJacobianError`.
    """
    theta = np.array(theta0, dtype=float)
    f = fn(theta)
    norm = float(np.max(np.abs(f)))
    merit = float(f @ f)
    path = [norm]
    it = 0
    while norm > cfg.tol and it < cfg.max_iter:
        it += 1
        jac = fn.jacobian(theta) if hasattr(fn, "jacobian") else fd_jacobian(fn, theta, f, cfg.fd_step)
        if not np.all(np.isfinite(jac)) or np.linalg.cond(jac) > cfg.max_condition:
            raise SingularJacobianError(f"moment Jacobian singular at iteration {it}")
        step = np.linalg.solve(jac, -f)
        # the Newton direction descends the sum of squares, not the max-abs norm
        lam = 1.0
        for _ in range(cfg.max_halvings + 1):
            cand = theta + lam * step
            fc = fn(cand)
            mc = float(fc @ fc)
            if np.isfinite(mc) and mc < merit:
                break
            lam *= 0.5
        else:
            log.debug("step halving exhausted at iteration %d (norm %.3g)", it, norm)
            return FitResult(theta, False, norm, it, tuple(path))
        theta, f, merit = cand, fc, mc
        norm = float(np.max(np.abs(f)))
        path.append(norm)
    return FitResult(theta, norm <= cfg.tol, norm, it, tuple(path))


def _bracket(f, f0: float, limit: float):
    """Expand outwards from zero until the moment changes sign."""
    prev_p = prev_n = 0.0
    fp = fn_ = f0
    a = 0.25
    while True:
        a = min(2.0 * a, limit)
        fa = f(a)
        if np.sign(fa) != np.sign(fp):
            return (prev_p, fp), (a, fa)
        fb = f(-a)
        if np.sign(fb) != np.sign(fn_):
            return (-a, fb), (prev_n, fn_)
        prev_p, fp, prev_n, fn_ = a, fa, -a, fb
        if a >= limit:
            raise NonIdentificationError(f"no sign change of the moment in [-{limit:g}, {limit:g}]")


def scalar_root(f, df, cfg: SolverConfig = SolverConfig(), limit: float = 10.0) -> FitResult:
    """Safeguarded Newton on a scalar moment, bracketed by expanding search.

    Iterates to machine precision (not just ``cfg.tol``) so that algebraically
    equivalent parameterisations land on the same root.
    """
    f0 = f(0.0)
    path = [abs(f0)]
    if f0 == 0.0:
        return FitResult([0.0], True, 0.0, 0, tuple(path))
    (a, fa), (b, fb) = _bracket(f, f0, limit)
    lo, hi = (a, b) if fa < 0 else (b, a)
    x = 0.0 if (min(a, b) <= 0.0 <= max(a, b)) else 0.5 * (a + b)
    fx = f0 if x == 0.0 else f(x)
    dfx = df(x)
    dx_old = dx = abs(b - a)
    it = 0
    for it in range(1, max(cfg.max_iter, 200) + 1):
        newton_ok = dfx != 0 and ((x - hi) * dfx - fx) * ((x - lo) * dfx - fx) < 0 and abs(2 * fx) <= abs(dx_old * dfx)
        dx_old = dx
        if newton_ok:
            dx = fx / dfx
            x_new = x - dx
        else:
            dx = 0.5 * (hi - lo)
            x_new = lo + dx
        if x_new == x:
            break
        x = x_new
        fx, dfx = f(x), df(x)
        path.append(abs(fx))
        if fx == 0.0 or abs(dx) <= 4 * np.finfo(float).eps * (1.0 + abs(x)):
            break
        if fx < 0:
            lo = x
        else:
            hi = x
    return FitResult([x], abs(fx) <= cfg.tol, abs(fx), it, tuple(path))


# ---------------------------------------------------------------------------
# beta


def fit_beta(data: Dataset, design: Design | None = None) -> BaselineOutcomeSpec:
    """Complete-case Gaussian MLE: least squares for y|x and z|y,x."""
    design = resolve_design(design, data.p)
    obs = data.observed
    xs = data.x[obs]
    k = design.size
    if obs.sum() < k + 2:
        raise SampleSizeError(f"need at least {k + 2} complete cases, have {int(obs.sum())}")
    X = design.matrix(xs)
    if np.linalg.matrix_rank(X) < k:
        raise SingularDesignError("complete-case design matrix is rank deficient")
    y = data.y[obs]
    z = data.z[obs]
    by, *_ = np.linalg.lstsq(X, y, rcond=None)
    ry = y - X @ by
    s2y = float(np.mean(ry**2))
    if s2y <= 1e-24 * max(1.0, float(np.mean(y**2))):
        raise SingularDesignError("zero residual variance of y among complete cases")
    Xz = np.column_stack([y, X])
    if np.linalg.matrix_rank(Xz) < k + 1:
        raise SingularDesignError("shadow regression design is rank deficient")
    bz, *_ = np.linalg.lstsq(Xz, z, rcond=None)
    rz = z - Xz @ bz
    s2z = float(np.mean(rz**2))
    if s2z <= 1e-24 * max(1.0, float(np.mean(z**2))):
        raise SingularDesignError("zero residual variance of z among complete cases")
    return BaselineOutcomeSpec(by, np.sqrt(s2y), float(bz[0]), bz[1:], np.sqrt(s2z), design)


def outcome_score(data: Dataset, beta: BaselineOutcomeSpec) -> np.ndarray:
    """``E_hat{r S(z, y, x; beta)}`` in the order
    ``(beta_y, sigma_y^2, beta_zy, beta_zx, sigma_z^2)``."""
    obs = data.observed
    design = resolve_design(beta.design, data.p)
    X = design.matrix(data.x[obs])
    y, z = data.y[obs], data.z[obs]
    s2y, s2z = beta.sigma_y**2, beta.sigma_z**2
    ey = y - X @ beta.beta_y
    ez = z - beta.beta_zy * y - X @ beta.beta_zx
    parts = [
        (X * ey[:, None]).sum(0) / s2y,
        [np.sum(-0.5 / s2y + 0.5 * ey**2 / s2y**2)],
        [np.sum(y * ez) / s2z],
        (X * ez[:, None]).sum(0) / s2z,
        [np.sum(-0.5 / s2z + 0.5 * ez**2 / s2z**2)],
    ]
    return np.concatenate(parts) / data.n


# ---------------------------------------------------------------------------
# alpha, gamma


class AlphaGammaMoments:
    """Empirical calibration moments as a function of ``theta = (alpha, gamma)``.

    With ``pin_gamma`` the odds ratio is held at zero, ``theta = alpha`` and
    only the ``H`` block of moments is used.
    """

    def __init__(self, data: Dataset, beta: BaselineOutcomeSpec, basis: MomentBasisSpec, pin_gamma: bool = False):
        basis = basis.resolved(data.p)
        self.data = data
        self.beta = beta
        self.basis = basis
        self.pin_gamma = pin_gamma
        self.obs = data.observed
        self.H = basis.propensity_design.matrix(data.x)
        self.k_alpha = self.H.shape[1]
        self.k_gamma = 0 if pin_gamma else len(basis.odds_ratio)
        self.G = np.column_stack([t(data.x, data.z) for t in basis.shadow])
        self._x_obs = data.x[self.obs]
        self._y_obs = data.y[self.obs]
        self._H_obs = self.H[self.obs]
        self._linear = None
        if not pin_gamma and self._closed_form_ok():
            self._linear = self._linear_parts()

    def _closed_form_ok(self) -> bool:
        gamma_linear = all(t.power == 1 for t in self.basis.odds_ratio)
        shadow_linear = all(t.variable is None or (t.variable == "z" and t.power == 1) for t in self.basis.shadow)
        return gamma_linear and shadow_linear

    def _linear_parts(self):
        """Pieces of ``G1 = A - sum_k gamma_k B_k`` and ``OR = Yb gamma`` (linear case).

        Under a linear odds ratio ``E(z | r=0, x) = beta_zy (m + s sigma^2) + offset``
        with slope ``s = sum_k gamma_k f_k(x)``, so ``G1`` is affine in ``gamma``.
        """
        x, beta = self.data.x, self.beta
        f = np.column_stack([t.covariate_factor(x) for t in self.basis.odds_ratio])
        mz = beta.beta_zy * beta.mean_y(x) + beta.shadow_offset(x)
        A, B = [], []
        for t, col in zip(self.basis.shadow, self.G.T):
            c = t.covariate_factor(x)
            if t.variable is None:
                A.append(col - c)
                B.append(np.zeros_like(f))
            else:
                A.append(col - c * mz)
                B.append(c[:, None] * beta.beta_zy * beta.sigma_y**2 * f)
        A = np.column_stack(A)
        B = np.stack(B, axis=1)  # (n, len(shadow), k_gamma)
        Yb = f[self.obs] * self._y_obs[:, None]
        return A, B, Yb

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        alpha = BaselinePropensitySpec(theta[: self.k_alpha], self.basis.propensity_design)
        g = np.zeros(len(self.basis.odds_ratio)) if self.pin_gamma else theta[self.k_alpha :]
        return alpha, OddsRatioSpec(g, self.basis.odds_ratio)

    def residual_weights(self, theta) -> np.ndarray:
        """``W r - 1`` per row."""
        theta = np.asarray(theta, dtype=float)
        alpha, gamma = self.split(theta)
        lin = self._H_obs @ alpha.alpha
        orv = self._linear[2] @ gamma.gamma if self._linear is not None else gamma(self._y_obs, self._x_obs)
        u = np.full(self.data.n, -1.0)
        u[self.obs] = weight_from_logit(response_logit(lin, orv)) - 1.0
        return u

    def _g1(self, theta) -> np.ndarray:
        _, gamma = self.split(theta)
        if self._linear is not None:
            A, B, _ = self._linear
            return A - B @ gamma.gamma
        return self.G - shadow_conditional_mean(self.basis.shadow, self.data.x, self.beta, gamma)

    def contributions(self, theta) -> np.ndarray:
        """Per-row moment contributions, shape ``(n, k)``."""
        u = self.residual_weights(theta)
        if self.pin_gamma:
            return u[:, None] * self.H
        return u[:, None] * np.column_stack([self._g1(theta), self.H])

    def __call__(self, theta) -> np.ndarray:
        u = self.residual_weights(theta)
        if self.pin_gamma:
            return (u @ self.H) / self.data.n
        return np.concatenate([u @ self._g1(theta), u @ self.H]) / self.data.n

    @property
    def has_analytic_jacobian(self) -> bool:
        return self.pin_gamma or self._linear is not None

    def jacobian(self, theta) -> np.ndarray:
        """Analytic Jacobian where available, forward differences otherwise."""
        if not self.has_analytic_jacobian:
            return fd_jacobian(self, theta)
        theta = np.asarray(theta, dtype=float)
        alpha, gamma = self.split(theta)
        lin = self._H_obs @ alpha.alpha
        eta = lin if self.pin_gamma else lin - self._linear[2] @ gamma.gamma
        e = np.where(eta > _ETA_FLOOR, np.exp(-np.maximum(eta, _ETA_FLOOR)), 0.0)  # dW/d(-eta)
        if self.pin_gamma:
            return -(self._H_obs * e[:, None]).T @ self._H_obs / self.data.n
        A, B, Yb = self._linear
        du = np.column_stack([-self._H_obs * e[:, None], Yb * e[:, None]])  # d(W r - 1)/d theta
        g1 = A - B @ gamma.gamma
        u = self.residual_weights(theta)
        top = g1[self.obs].T @ du
        top[:, self.k_alpha :] -= np.einsum("i,ijk->jk", u, B)
        bottom = self.H[self.obs].T @ du
        return np.vstack([top, bottom]) / self.data.n


def mar_start(data: Dataset, design: Design) -> np.ndarray:
    """Logistic regression of ``r`` on the propensity design."""
    import statsmodels.api as sm

    X = design.matrix(data.x)
    rbar = data.r.mean()
    fallback = np.zeros(X.shape[1])
    fallback[0] = np.log(rbar / (1 - rbar)) if 0 < rbar < 1 else 0.0
    try:
        res = sm.Logit(data.r.astype(float), X).fit(disp=0, method="newton", maxiter=50, warn_convergence=False)
        params = np.asarray(res.params, dtype=float)
        return params if np.all(np.isfinite(params)) else fallback
    except Exception:  # perfect separation and friends; MAR start is only a heuristic
        return fallback


def fit_alpha_gamma(
    data: Dataset,
    beta: BaselineOutcomeSpec,
    basis: MomentBasisSpec = MomentBasisSpec(),
    cfg: SolverConfig = SolverConfig(),
    init: np.ndarray | None = None,
    pin_gamma: bool = False,
) -> FitResult:
    """Solve the calibration equations for ``(alpha, gamma)``.

    Starts from the MAR fit (logistic ``alpha``, ``gamma = 0``) unless ``init``
    is given.  Raises :class:`ConvergenceError` carrying the result on failure.
    """
    moments = AlphaGammaMoments(data, beta, basis, pin_gamma)
    if init is None:
        init = np.concatenate([mar_start(data, moments.basis.propensity_design), np.zeros(moments.k_gamma)])
    res = newton_solve(moments, init, cfg)
    if not res.converged:
        raise ConvergenceError(
            f"(alpha, gamma) solver stopped at moment norm {res.final_moment_norm:.3g} after {res.iterations} iterations",
            res,
        )
    return res


# ---------------------------------------------------------------------------
# phi, psi


def extension_direction(g, beta, gamma, mu_reg: float):
    """Concrete ``g`` for the weight extension; ``"m0"`` becomes ``M0 - mu_reg``."""
    if isinstance(g, str) and g == CENTERED_G:
        return CenteredOutcomeMean(beta, gamma, float(mu_reg))
    return g


def _phi_parts(data, beta, gamma, alpha, mu_reg, basis: MomentBasisSpec):
    basis = basis.resolved(data.p)
    obs = data.observed
    xo = data.x[obs]
    lin = alpha.linear_predictor(xo)
    orv = gamma(data.y[obs], xo)
    g = extension_direction(basis.g, beta, gamma, mu_reg)
    return lin, orv, g(xo), tilted_mean_y(data.x, beta, gamma)


def phi_moment(data, beta, gamma, alpha, mu_reg: float, basis: MomentBasisSpec = MomentBasisSpec()):
    """``phi -> E_hat[{W_ext(phi) r - 1}{M0 - mu_reg}]`` and its derivative."""
    lin, orv, g, m0 = _phi_parts(data, beta, gamma, alpha, mu_reg, basis)
    d = m0 - mu_reg
    d_obs = d[data.observed]
    total = d.sum()
    n = data.n

    def f(phi):
        w = weight_from_logit(response_logit(lin, orv, phi * g))
        return float((w @ d_obs - total) / n)

    def df(phi):
        w = weight_from_logit(response_logit(lin, orv, phi * g))
        return float(((w - 1.0) * g) @ d_obs / n)

    return f, df


def fit_phi(
    data: Dataset,
    beta: BaselineOutcomeSpec,
    gamma: OddsRatioSpec,
    alpha: BaselinePropensitySpec,
    mu_reg: float,
    basis: MomentBasisSpec = MomentBasisSpec(),
    cfg: SolverConfig = SolverConfig(),
) -> FitResult:
    f, df = phi_moment(data, beta, gamma, alpha, mu_reg, basis)
    res = scalar_root(f, df, cfg)
    if not res.converged:
        raise ConvergenceError(f"phi solver stopped at |moment| {res.final_moment_norm:.3g}", res)
    return res


def psi_moment(data, beta, gamma, alpha, psi: float, basis: MomentBasisSpec = MomentBasisSpec()) -> float:
    """``E_hat[{W - 1} r {y - M0_ext(x; psi)}]``."""
    basis = basis.resolved(data.p)
    obs = data.observed
    xo = data.x[obs]
    w1 = weight_from_logit(response_logit(alpha.linear_predictor(xo), gamma(data.y[obs], xo))) - 1.0
    m = tilted_mean_y(xo, beta, gamma) + psi * basis.q(xo)
    return float(w1 @ (data.y[obs] - m) / data.n)


def fit_psi(
    data: Dataset,
    beta: BaselineOutcomeSpec,
    gamma: OddsRatioSpec,
    alpha: BaselinePropensitySpec,
    basis: MomentBasisSpec = MomentBasisSpec(),
    cfg: SolverConfig = SolverConfig(),
) -> FitResult:
    """Closed form ``psi = E_hat[(W-1) r (y - M0)] / E_hat[(W-1) r q]``."""
    basis = basis.resolved(data.p)
    obs = data.observed
    xo = data.x[obs]
    w1 = weight_from_logit(response_logit(alpha.linear_predictor(xo), gamma(data.y[obs], xo))) - 1.0
    resid = data.y[obs] - tilted_mean_y(xo, beta, gamma)
    qv = basis.q(xo)
    den = float(w1 @ qv / data.n)
    if not abs(den) >= 1e-12:
        raise DegenerateExtensionError(f"outcome-extension denominator {den:.3g} is degenerate")
    psi = float(w1 @ resid / data.n) / den
    norm = abs(float(w1 @ (resid - psi * qv) / data.n))
    if norm > cfg.tol:
        raise ConvergenceError(f"psi moment {norm:.3g} above tolerance", FitResult([psi], False, norm, 0))
    return FitResult([psi], True, norm, 0)


__all__ = [
    "AlphaGammaMoments",
    "ExtendedOutcomeSpec",
    "ExtendedWeightSpec",
    "FitResult",
    "MomentBasisSpec",
    "SolverConfig",
    "fd_jacobian",
    "fit_alpha_gamma",
    "fit_beta",
    "fit_phi",
    "fit_psi",
    "mar_start",
    "newton_solve",
    "outcome_score",
    "phi_moment",
    "psi_moment",
    "scalar_root",
]
