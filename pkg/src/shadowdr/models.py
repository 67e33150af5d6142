"""Working models and the identities linking them.

The complete-data law is factorised into three pieces:

* a baseline propensity ``pr(r=1 | y=0, x)`` (logistic in a design of x),
* a baseline outcome density ``f(z, y | r=1, x)`` (Gaussian y given x, then
  Gaussian z given y and x),
* a log odds ratio ``OR(y | x) = gamma^T b(y, x)`` with every basis term
  vanishing at ``y = 0``.

Sign convention: ``W = 1 + exp{OR(y|x) - (1, x^T) alpha}``, so a positive
``gamma`` lowers the response probability for larger ``y``.  Results written
in terms of ``logit pr(r=1|y,x) = ... + c_y y`` map over with ``gamma = -c_y``.

All functions accept a single covariate vector (shape ``(p,)``) or a matrix of
rows (shape ``(n, p)``); single-row input returns Python floats.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .errors import ConfigError, DomainError, QuadratureError
from .terms import Design, Term, default_g, parse_terms, resolve_design

# exp(708) is the largest power of e that stays finite in double precision
_ETA_FLOOR = -708.0
_P_CEIL = np.nextafter(1.0, 0.0)

QUAD_NODES = (64, 128)
QUAD_RTOL = 1e-9
SHADOW_NODES = 32
QUAD_BLOCK = 2048  # rows per quadrature pass, bounds memory at large n


def _rows(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        return x.reshape(1, -1), True
    return x, False


def _out(v, single: bool):
    v = np.asarray(v, dtype=float)
    return float(v.reshape(-1)[0]) if single else v


def _check_finite(*arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise DomainError("inputs must be finite")


def _expand(c: np.ndarray, like: np.ndarray) -> np.ndarray:
    return c.reshape(c.shape + (1,) * (like.ndim - c.ndim))


# ---------------------------------------------------------------------------
# specifications


@dataclass(frozen=True, eq=False)
class OddsRatioSpec:
    """``OR(y | x; gamma) = sum_k gamma_k b_k(y, x)``; default basis ``{y}``."""

    gamma: np.ndarray
    basis: tuple[Term, ...] = field(default_factory=lambda: (Term.parse("y"),))

    def __post_init__(self):
        basis = parse_terms(self.basis)
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if gamma.shape != (len(basis),):
            raise ConfigError(f"gamma has length {gamma.size}, basis has {len(basis)} terms")
        for t in basis:
            if t.variable == "z":
                raise ConfigError(f"odds-ratio term {t} depends on the shadow variable")
            if t.variable != "y" or t.power < 1:
                raise ConfigError(f"odds-ratio term {t} does not vanish at y = 0")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "gamma", gamma)

    @property
    def is_linear(self) -> bool:
        return all(t.power == 1 for t in self.basis)

    def slope(self, x: np.ndarray) -> np.ndarray:
        """Coefficient of ``y`` for a basis that is linear in ``y``."""
        out = np.zeros(x.shape[0])
        for g, t in zip(self.gamma, self.basis):
            out = out + g * t.covariate_factor(x)
        return out

    def __call__(self, y, x: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast_shapes(y.shape, (x.shape[0],) + (1,) * max(y.ndim - 1, 0)))
        for g, t in zip(self.gamma, self.basis):
            if g != 0.0:
                out = out + g * _expand(t.covariate_factor(x), y) * y**t.power
        return out

    def derivatives(self, y: np.ndarray, x: np.ndarray):
        """``OR``, ``dOR/dy`` and ``d2OR/dy2`` on a grid ``y`` of shape ``(n, ...)``."""
        v = np.zeros_like(y)
        d1 = np.zeros_like(y)
        d2 = np.zeros_like(y)
        for g, t in zip(self.gamma, self.basis):
            c = g * _expand(t.covariate_factor(x), y)
            k = t.power
            v = v + c * y**k
            d1 = d1 + c * k * y ** (k - 1)
            if k >= 2:
                d2 = d2 + c * k * (k - 1) * y ** (k - 2)
        return v, d1, d2


@dataclass(frozen=True, eq=False)
class BaselinePropensitySpec:
    """``pr(r=1 | y=0, x) = expit(D(x) alpha)`` with ``D`` a design (default ``(1, x^T)``)."""

    alpha: np.ndarray
    design: Design | None = None

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        if self.design is not None and self.design.size != self.alpha.size:
            raise ConfigError("alpha length does not match the propensity design")

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        d = resolve_design(self.design, x.shape[1])
        if d.size != self.alpha.size:
            raise ConfigError(f"alpha has length {self.alpha.size}, design needs {d.size}")
        return d.matrix(x) @ self.alpha

    def __call__(self, x) -> np.ndarray:
        rows, single = _rows(x)
        return _out(expit(self.linear_predictor(rows)), single)


@dataclass(frozen=True, eq=False)
class BaselineOutcomeSpec:
    """Gaussian complete-case density.

    ``y | r=1, x ~ N(D(x) beta_y, sigma_y^2)`` and
    ``z | y, r=1, x ~ N(beta_zy y + D(x) beta_zx, sigma_z^2)``.
    """

    beta_y: np.ndarray
    sigma_y: float
    beta_zy: float
    beta_zx: np.ndarray
    sigma_z: float
    design: Design | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta_y", np.atleast_1d(np.asarray(self.beta_y, dtype=float)))
        object.__setattr__(self, "beta_zx", np.atleast_1d(np.asarray(self.beta_zx, dtype=float)))
        if not (self.sigma_y > 0 and self.sigma_z > 0):
            raise ConfigError("sigma_y and sigma_z must be positive")
        if self.beta_y.shape != self.beta_zx.shape:
            raise ConfigError("beta_y and beta_zx must share the outcome design")

    def _matrix(self, x: np.ndarray) -> np.ndarray:
        d = resolve_design(self.design, x.shape[1])
        if d.size != self.beta_y.size:
            raise ConfigError(f"beta_y has length {self.beta_y.size}, design needs {d.size}")
        return d.matrix(x)

    def mean_y(self, x: np.ndarray) -> np.ndarray:
        return self._matrix(x) @ self.beta_y

    def shadow_offset(self, x: np.ndarray) -> np.ndarray:
        return self._matrix(x) @ self.beta_zx

    def mean_z(self, y, x: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self.beta_zy * y + _expand(self.shadow_offset(x), y)

    def logpdf(self, z, y, x) -> np.ndarray:
        rows, single = _rows(x)
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        ey = self.mean_y(rows)
        ez = self.mean_z(y, rows)
        ly = -0.5 * ((y - ey) / self.sigma_y) ** 2 - np.log(self.sigma_y)
        lz = -0.5 * ((z - ez) / self.sigma_z) ** 2 - np.log(self.sigma_z)
        return _out(ly + lz - np.log(2 * np.pi), single)

    def pdf(self, z, y, x):
        return np.exp(self.logpdf(z, y, x))


@dataclass(frozen=True, eq=False)
class ExtendedWeightSpec:
    """One-parameter extension of the baseline propensity.

    ``pr_ext(r=1 | y=0, x; phi) = p0 / {p0 + exp(phi g(x)) (1 - p0)}``.
    """

    phi: float = 0.0
    g: Term | CenteredOutcomeMean | None = None

    def g_values(self, x: np.ndarray) -> np.ndarray:
        g = default_g(x.shape[1]) if self.g is None else self.g
        return g(x)


@dataclass(frozen=True, eq=False)
class CenteredOutcomeMean:
    """``g(x) = M0(x; beta, gamma) - center``.

    Used as the extension direction, it makes the ``phi`` equation strictly
    increasing in ``phi``, so its root exists and is unique whenever ``g``
    takes both signs among complete cases.
    """

    beta: "BaselineOutcomeSpec"
    gamma: "OddsRatioSpec"
    center: float
    variable = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return tilted_mean_y(np.atleast_2d(x), self.beta, self.gamma) - self.center

    def __str__(self) -> str:
        return "m0"


@dataclass(frozen=True, eq=False)
class ExtendedOutcomeSpec:
    """Identity-link extension ``M0_ext(x; psi) = M0(x) + psi q(x)``; default ``q = 1``."""

    psi: float = 0.0
    q: Term | None = None

    def q_values(self, x: np.ndarray) -> np.ndarray:
        return (Term() if self.q is None else self.q)(x)


# ---------------------------------------------------------------------------
# propensity and weights


def response_logit(lin: np.ndarray, orv: np.ndarray, shift=0.0) -> np.ndarray:
    """``logit pr(r=1 | y, x)`` from the baseline linear predictor and OR.

    ``shift`` is ``phi g(x)`` for the extended model; it enters as
    ``(lin - shift) - OR`` so that ``shift = 0`` reproduces the baseline
    bit for bit.
    """
    return (lin - shift) - orv


def prob_from_logit(eta: np.ndarray) -> np.ndarray:
    return np.minimum(expit(np.maximum(eta, _ETA_FLOOR)), _P_CEIL)


def weight_from_logit(eta: np.ndarray) -> np.ndarray:
    return 1.0 + np.exp(-np.maximum(eta, _ETA_FLOOR))


def log_weight_from_logit(eta: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, -eta)


def odds_ratio(y, x, spec: OddsRatioSpec):
    """Log odds ratio ``OR(y | x; gamma)``; exactly zero at ``y = 0``."""
    rows, single = _rows(x)
    y = np.asarray(y, dtype=float)
    _check_finite(rows, y, spec.gamma)
    return _out(spec(np.broadcast_to(y, (rows.shape[0],)) if y.ndim == 0 else y, rows), single)


def _logit(x, y, alpha: BaselinePropensitySpec, gamma: OddsRatioSpec, shift=None):
    rows, single = _rows(x)
    y = np.asarray(y, dtype=float)
    _check_finite(rows, y, alpha.alpha, gamma.gamma)
    y = np.broadcast_to(y, (rows.shape[0],)) if y.ndim == 0 else y
    lin = alpha.linear_predictor(rows)
    s = 0.0 if shift is None else shift(rows)
    return response_logit(lin, gamma(y, rows), s), single


def propensity(x, y, alpha: BaselinePropensitySpec, gamma: OddsRatioSpec):
    """``pr(r=1 | y, x) = p0 / {p0 + exp(OR) (1 - p0)}``, strictly inside (0, 1)."""
    eta, single = _logit(x, y, alpha, gamma)
    return _out(prob_from_logit(eta), single)


def weight(x, y, alpha: BaselinePropensitySpec, gamma: OddsRatioSpec):
    """Inverse probability weight ``1 + exp{OR - D(x) alpha}``."""
    eta, single = _logit(x, y, alpha, gamma)
    return _out(weight_from_logit(eta), single)


def _ext_shift(ext: ExtendedWeightSpec):
    _check_finite(np.asarray(ext.phi))
    return lambda rows: ext.phi * ext.g_values(rows)


def extended_propensity(x, y, ext: ExtendedWeightSpec, alpha: BaselinePropensitySpec, gamma: OddsRatioSpec):
    eta, single = _logit(x, y, alpha, gamma, _ext_shift(ext))
    return _out(prob_from_logit(eta), single)


def extended_weight(x, y, ext: ExtendedWeightSpec, alpha: BaselinePropensitySpec, gamma: OddsRatioSpec):
    eta, single = _logit(x, y, alpha, gamma, _ext_shift(ext))
    return _out(weight_from_logit(eta), single)


# ---------------------------------------------------------------------------
# exponential tilting: f(z, y | r=0, x) is f(z, y | r=1, x) tilted by exp(OR)


@lru_cache(maxsize=None)
def _hermite(k: int):
    t, w = np.polynomial.hermite.hermgauss(k)
    t.setflags(write=False)
    lw = np.log(w)
    lw.setflags(write=False)
    return t, lw


@lru_cache(maxsize=None)
def _hermite_prob(k: int):
    """Nodes/weights for expectations under a standard normal."""
    t, w = np.polynomial.hermite_e.hermegauss(k)
    w = w / w.sum()
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w


def _tilt_mode(x, m, s2, gamma: OddsRatioSpec):
    """Mode and curvature scale of ``OR(y) + log N(y; m, s2)`` per row."""
    y = m.copy()
    for _ in range(100):
        _, d1, d2 = gamma.derivatives(y, x)
        l1 = d1 - (y - m) / s2
        l2 = d2 - 1.0 / s2
        if np.any(l2 >= 0):
            raise QuadratureError("tilted outcome density is not log-concave at the iterate")
        step = l1 / l2
        y = y - step
        if np.all(np.abs(step) <= 1e-13 * (1.0 + np.abs(y))):
            break
    _, _, d2 = gamma.derivatives(y, x)
    l2 = d2 - 1.0 / s2
    if np.any(l2 >= 0) or not np.all(np.isfinite(y)):
        raise QuadratureError("tilted outcome density has no interior mode")
    return y, 1.0 / np.sqrt(-l2)


def _gh_tilt(x, beta: BaselineOutcomeSpec, gamma: OddsRatioSpec, fn_y, k: int):
    """One adaptive Gauss-Hermite pass with ``k`` nodes.

    Returns ``log E[exp(OR) | r=1, x]`` and, when ``fn_y`` is given,
    ``E[fn_y(y) | r=0, x]``.
    """
    m = beta.mean_y(x)
    s2 = beta.sigma_y**2
    mode, scale = _tilt_mode(x, m, s2, gamma)
    t, lw = _hermite(k)
    h = np.sqrt(2.0) * scale
    y = mode[:, None] + h[:, None] * t[None, :]
    logf = lw + t**2 + gamma(y, x) - (y - m[:, None]) ** 2 / (2.0 * s2)
    log_norm = logsumexp(logf, axis=1) + np.log(h) - 0.5 * np.log(2.0 * np.pi * s2)
    if fn_y is None:
        return log_norm, None
    wts = np.exp(logf - logf.max(axis=1, keepdims=True))
    vals = np.broadcast_to(fn_y(y), y.shape)
    return log_norm, (wts * vals).sum(axis=1) / wts.sum(axis=1)


def _adaptive_rows(evaluate, rows: np.ndarray, block: int = QUAD_BLOCK):
    """:func:`_adaptive` applied to ``evaluate(rows_block, k)`` block by block."""
    if rows.shape[0] <= block:
        return _adaptive(lambda k: evaluate(rows, k))
    parts = [
        _adaptive(lambda k, b=rows[i : i + block]: evaluate(b, k)) for i in range(0, rows.shape[0], block)
    ]
    return np.concatenate(parts)


def _adaptive(evaluate, nodes=QUAD_NODES, rtol=QUAD_RTOL):
    prev = evaluate(nodes[0])
    worst = np.inf
    for k in nodes[1:]:
        cur = evaluate(k)
        worst = float(np.max(np.abs(cur - prev) / np.maximum(1.0, np.abs(cur)))) if cur.size else 0.0
        if worst <= rtol:
            return cur
        prev = cur
    raise QuadratureError(
        f"Gauss-Hermite estimates did not stabilise (max relative change {worst:.3g} at {nodes[-1]} nodes)",
        max_discrepancy=worst,
        nodes=nodes[-1],
    )


def _method(method: str, gamma: OddsRatioSpec) -> str:
    if method == "auto":
        return "closed" if gamma.is_linear else "quadrature"
    if method == "closed" and not gamma.is_linear:
        raise ConfigError("closed-form tilt needs an odds-ratio basis linear in y")
    if method not in ("closed", "quadrature"):
        raise ConfigError(f"unknown tilt method {method!r}")
    return method


def tilted_normalizer(x, beta: BaselineOutcomeSpec, gamma: OddsRatioSpec, method: str = "auto"):
    """``E[exp{OR(y|x)} | r=1, x]``."""
    rows, single = _rows(x)
    _check_finite(rows)
    if _method(method, gamma) == "closed":
        s = gamma.slope(rows)
        m = beta.mean_y(rows)
        return _out(np.exp(s * m + 0.5 * (s * beta.sigma_y) ** 2), single)
    log_norm = _adaptive_rows(lambda b, k: _gh_tilt(b, beta, gamma, None, k)[0], rows)
    return _out(np.exp(log_norm), single)


def tilted_mean_y(x, beta: BaselineOutcomeSpec, gamma: OddsRatioSpec, method: str = "auto"):
    """``M0(x) = E(y | r=0, x)``.

    For a basis linear in ``y`` the tilted law of ``y`` is
    ``N(m + slope * sigma_y^2, sigma_y^2)``; otherwise adaptive quadrature.
    """
    rows, single = _rows(x)
    _check_finite(rows)
    if _method(method, gamma) == "closed":
        return _out(beta.mean_y(rows) + gamma.slope(rows) * beta.sigma_y**2, single)
    return _out(_adaptive_rows(lambda b, k: _gh_tilt(b, beta, gamma, lambda y: y, k)[1], rows), single)


def tilted_mean_fn(h: Callable, x, beta: BaselineOutcomeSpec, gamma: OddsRatioSpec):
    """``E[h(z, y) | r=0, x]`` by adaptive quadrature.

    ``h`` must broadcast over arrays; the inner integral over ``z | y`` uses a
    fixed 32-node rule, exact for polynomials in ``z`` of degree below 64.
    Covariate-dependent integrands should factor ``x`` out of ``h``.
    """
    rows, single = _rows(x)
    _check_finite(rows)
    u, v = _hermite_prob(SHADOW_NODES)

    def evaluate(b, k):
        def fn_y(y):
            zc = beta.mean_z(y, b)[..., None] + beta.sigma_z * u
            vals = np.broadcast_to(h(zc, y[..., None]), zc.shape)
            return vals @ v

        return _gh_tilt(b, beta, gamma, fn_y, k)[1]

    return _out(_adaptive_rows(evaluate, rows), single)


def shadow_conditional_mean(terms: Sequence[Term], x, beta: BaselineOutcomeSpec, gamma: OddsRatioSpec):
    """Columns ``E[G_k(x, z) | r=0, x]`` for shadow terms ``G_k = c_k(x) z^j``.

    Terms linear in ``z`` under a linear odds ratio use
    ``E(z | r=0, x) = beta_zy M0(x) + offset(x)``; anything else goes through
    :func:`tilted_mean_fn`.
    """
    rows, _ = _rows(x)
    cols = []
    mean_z = None
    for t in terms:
        c = t.covariate_factor(rows)
        if t.variable is None:
            cols.append(c)
            continue
        if t.variable != "z":
            raise ConfigError(f"shadow term {t} must involve z, not y")
        if t.power == 1 and gamma.is_linear:
            if mean_z is None:
                mean_z = beta.beta_zy * tilted_mean_y(rows, beta, gamma, "closed") + beta.shadow_offset(rows)
            cols.append(c * mean_z)
        else:
            k = t.power
            cols.append(c * tilted_mean_fn(lambda z, y, k=k: z**k, rows, beta, gamma))
    return np.column_stack(cols) if cols else np.zeros((rows.shape[0], 0))


def extended_outcome_mean(x, ext: ExtendedOutcomeSpec, beta: BaselineOutcomeSpec, gamma: OddsRatioSpec):
    """``M0_ext(x; psi) = M0(x; beta, gamma) + psi q(x)``."""
    rows, single = _rows(x)
    _check_finite(rows, np.asarray(ext.psi))
    m0 = tilted_mean_y(rows, beta, gamma)
    if ext.psi == 0.0:
        return _out(m0, single)
    return _out(m0 + ext.psi * ext.q_values(rows), single)
