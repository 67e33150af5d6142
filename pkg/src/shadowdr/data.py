"""Observed-data containers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class ObservedSample:
    """One record: covariates, shadow variable, response indicator, outcome."""

    x: np.ndarray
    z: float
    r: int
    y: float | None = None

    def __post_init__(self):
        if (self.y is not None) != (self.r == 1):
            raise DomainError("y must be present exactly when r == 1")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Full observed sample.

    ``y`` is stored as a float array with ``nan`` where ``r == 0``; estimators
    only ever see ``y`` through :attr:`y_filled`, which zeroes the missing
    entries so that products with ``r`` stay finite.
    """

    x: np.ndarray
    z: np.ndarray
    r: np.ndarray
    y: np.ndarray
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        z = np.asarray(self.z, dtype=float).ravel()
        r = np.asarray(self.r).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        n = z.shape[0]
        if x.shape[0] != n or r.shape[0] != n or y.shape[0] != n:
            raise DomainError("x, z, r, y must have the same number of rows")
        if not np.all((r == 0) | (r == 1)):
            raise DomainError("r must be binary")
        r = r.astype(np.int8)
        observed = r == 1
        if np.any(np.isnan(y) == observed):
            raise DomainError("y must be present exactly when r == 1")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z)) and np.all(np.isfinite(y[observed]))):
            raise DomainError("all present values must be finite")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DomainError("covariate_names does not match the number of columns of x")
        for arr in (x, z, r, y):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "covariate_names", names)

    @classmethod
    def from_records(cls, records: list[ObservedSample]) -> "Dataset":
        x = np.array([np.atleast_1d(s.x) for s in records], dtype=float)
        return cls(
            x=x,
            z=[s.z for s in records],
            r=[s.r for s in records],
            y=[np.nan if s.y is None else s.y for s in records],
        )

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return self.r == 1

    @property
    def n_complete(self) -> int:
        return int(self.r.sum())

    @property
    def y_filled(self) -> np.ndarray:
        return np.where(self.observed, self.y, 0.0)

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.x[idx], self.z[idx], self.r[idx], self.y[idx], self.covariate_names)

    def records(self) -> Iterator[ObservedSample]:
        for i in range(self.n):
            yi = float(self.y[i]) if self.r[i] == 1 else None
            yield ObservedSample(self.x[i].copy(), float(self.z[i]), int(self.r[i]), yi)
