"""Exception hierarchy.

Every failure raised by the package derives from :class:`ShadowError` so that
harness code (bootstrap, simulation study) can catch estimation failures
without swallowing programming errors.
"""

from __future__ import annotations


class ShadowError(Exception):
    """Base class for all package errors."""


class DomainError(ShadowError, ValueError):
    """Non-finite or otherwise inadmissible numeric input."""


class SampleSizeError(ShadowError, ValueError):
    """Too few (complete) cases for the requested fit."""


class SingularDesignError(ShadowError, ValueError):
    """Rank-deficient design or zero residual variance."""


class NoDataError(ShadowError, ValueError):
    """No complete cases available."""


class QuadratureError(ShadowError, ArithmeticError):
    """Gauss-Hermite quadrature failed to stabilise."""

    def __init__(self, message: str, *, max_discrepancy: float | None = None, nodes: int | None = None):
        super().__init__(message)
        self.max_discrepancy = max_discrepancy
        self.nodes = nodes


class SolverError(ShadowError, ArithmeticError):
    """Base class for root-finding failures."""


class ConvergenceError(SolverError):
    """Root finder stopped without meeting the tolerance."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result

    @property
    def final_norm(self) -> float | None:
        return None if self.result is None else self.result.final_moment_norm

    @property
    def path(self):
        return () if self.result is None else self.result.path


class SingularJacobianError(SolverError):
    """Moment Jacobian is singular (or numerically so) at an iterate."""


class NonIdentificationError(SolverError):
    """No sign change of a scalar moment inside the admissible bracket."""


class DegenerateExtensionError(SolverError):
    """Extension parameter cannot be estimated (e.g. vanishing denominator)."""


class DegenerateWeightsError(ShadowError, ValueError):
    """Weights are degenerate, e.g. every outcome is observed."""


class InferenceUnreliableError(ShadowError, RuntimeError):
    """Too many bootstrap resamples failed."""


class UndefinedStatisticError(ShadowError, ArithmeticError):
    """Wald statistic undefined because the standard error is zero."""


class ConfigError(ShadowError, ValueError):
    """Invalid run or scenario configuration."""


class DataError(ShadowError, ValueError):
    """Malformed dataset file."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class OracleInconsistencyError(ShadowError, RuntimeError):
    """Two independent ground-truth routes disagree."""
