"""Monomial terms and design matrices built from them.

Working models are declared with small text expressions such as ``"x1"``,
``"x1^2"``, ``"x2*y"`` or ``"z"``.  A :class:`Term` is a product of covariate
powers times a power of a single response-like variable (``y`` or ``z``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError

_FACTOR = re.compile(r"^(?:x(\d+)|(y)|(z))(?:\^(\d+))?$")


@dataclass(frozen=True)
class Term:
    """Product ``prod_j x_j^k_j * v^power`` with ``v`` in {y, z}.

    ``covariates`` holds ``(index, power)`` pairs with zero-based indices.
    ``variable`` is ``None`` for pure covariate terms (then ``power == 0``).
    """

    covariates: tuple[tuple[int, int], ...] = ()
    variable: str | None = None
    power: int = 0

    def __post_init__(self):
        if (self.variable is None) != (self.power == 0):
            raise ConfigError("a term has a y/z factor iff its power is positive")

    @classmethod
    def parse(cls, text: str) -> "Term":
        text = text.replace(" ", "")
        if text in ("", "1"):
            return cls()
        covs: dict[int, int] = {}
        variable, power = None, 0
        for factor in text.split("*"):
            m = _FACTOR.match(factor)
            if m is None:
                raise ConfigError(f"cannot parse term {text!r} (factor {factor!r})")
            k = int(m.group(4)) if m.group(4) else 1
            if k < 1:
                raise ConfigError(f"non-positive power in {text!r}")
            if m.group(1) is not None:
                j = int(m.group(1)) - 1
                if j < 0:
                    raise ConfigError(f"covariates are numbered from x1 ({text!r})")
                covs[j] = covs.get(j, 0) + k
            else:
                name = m.group(2) or m.group(3)
                if variable not in (None, name):
                    raise ConfigError(f"term {text!r} mixes y and z")
                variable = name
                power += k
        return cls(tuple(sorted(covs.items())), variable, power)

    @property
    def is_constant(self) -> bool:
        return not self.covariates and self.variable is None

    @property
    def max_covariate(self) -> int:
        return max((j for j, _ in self.covariates), default=-1)

    def covariate_factor(self, x: np.ndarray) -> np.ndarray:
        """Covariate part evaluated on rows of ``x`` (shape ``(n, p)``)."""
        out = np.ones(x.shape[0])
        for j, k in self.covariates:
            if j >= x.shape[1]:
                raise ConfigError(f"term {self} needs x{j + 1} but data has p={x.shape[1]}")
            out = out * x[:, j] ** k
        return out

    def __call__(self, x: np.ndarray, v: np.ndarray | float | None = None) -> np.ndarray:
        c = self.covariate_factor(x)
        if self.variable is None:
            return c
        return c * np.asarray(v, dtype=float) ** self.power

    def with_variable(self, name: str) -> "Term":
        return Term(self.covariates, name, self.power)

    def __str__(self) -> str:
        parts = [f"x{j + 1}" + (f"^{k}" if k > 1 else "") for j, k in self.covariates]
        if self.variable is not None:
            parts.append(self.variable + (f"^{self.power}" if self.power > 1 else ""))
        return "*".join(parts) or "1"


def parse_terms(texts: Iterable[str | Term]) -> tuple[Term, ...]:
    return tuple(t if isinstance(t, Term) else Term.parse(t) for t in texts)


@dataclass(frozen=True)
class Design:
    """Intercept plus covariate terms; ``Design.linear(p)`` gives ``(1, x^T)``."""

    terms: tuple[Term, ...] = ()

    def __post_init__(self):
        for t in self.terms:
            if t.variable is not None:
                raise ConfigError(f"design term {t} may not involve y or z")
            if t.is_constant:
                raise ConfigError("the intercept is implicit in a design")

    @classmethod
    def linear(cls, p: int) -> "Design":
        return cls(tuple(Term(((j, 1),)) for j in range(p)))

    @classmethod
    def parse(cls, texts: Sequence[str]) -> "Design":
        return cls(parse_terms(texts))

    @property
    def size(self) -> int:
        return 1 + len(self.terms)

    def matrix(self, x: np.ndarray) -> np.ndarray:
        cols = [np.ones(x.shape[0])] + [t(x) for t in self.terms]
        return np.column_stack(cols)

    def names(self) -> list[str]:
        return ["1"] + [str(t) for t in self.terms]


def resolve_design(design: Design | None, p: int) -> Design:
    return Design.linear(p) if design is None else design


def default_g(p: int) -> Term:
    """First covariate, or the constant when there are no covariates."""
    return Term(((0, 1),)) if p > 0 else Term()
