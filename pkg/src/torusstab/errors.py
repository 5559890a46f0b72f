"""
Exception hierarchy for torusstab.

Certificate failures are reported as data; these exceptions cover the
cases where a computation cannot produce a result at all.
"""

from typing import Any, Optional


class TorusStabError(Exception):
    """Base class for all torusstab errors."""


class ConfigError(TorusStabError, ValueError):
    """Malformed or invalid run configuration."""


class PreconditionError(TorusStabError, ValueError):
    """An operation was called outside its domain."""


class ConstructionError(TorusStabError, RuntimeError):
    """
    A geometric object could not be built.

    Args:
        message: Human readable reason
        stage: Pipeline stage that failed (e.g. "build_f2", "build_h_on_K")
        witness: Worst point or value found, if any
    """

    def __init__(self, message: str, stage: Optional[str] = None, witness: Any = None):
        super().__init__(message)
        self.stage = stage
        self.witness = witness

    def __str__(self) -> str:
        base = super().__str__()
        if self.stage:
            return f"[{self.stage}] {base}"
        return base


class ConvergenceError(ConstructionError):
    """An iteration budget was exhausted."""

    def __init__(self, message: str, stage: Optional[str] = None, residual: Optional[float] = None):
        super().__init__(message, stage=stage, witness=residual)
        self.residual = residual


class GuardViolation(ConstructionError):
    """A perturbation window touches a guarded set."""

    def __init__(self, guard: str, message: str):
        super().__init__(f"window violates guard '{guard}': {message}", stage="perturb")
        self.guard = guard
