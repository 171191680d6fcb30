"""Exception types shared across the offloading library."""

from __future__ import annotations

from typing import Iterable, List


class OffloadError(Exception):
    """Base class for every error raised by the library."""


class ConfigError(OffloadError):
    """Raised when a scenario, experiment or settings file cannot be used."""


class InstanceValidationError(OffloadError):
    """Raised when an instance (or part of it) breaks a model invariant.

    Carries every violation found, not just the first one.
    """

    def __init__(self, violations: Iterable[str]):
        self.violations: List[str] = list(violations)
        super().__init__("; ".join(self.violations) or "invalid instance")


class MilpValidationError(OffloadError):
    """Raised when a MilpProblem is malformed (bad bounds, unknown variable, empty)."""


class NumericError(OffloadError):
    """Raised when the simplex loses numerical control; never returned as a wrong answer."""


class SolverStatusError(OffloadError):
    """Raised when a solution without usable values is handed to code that needs one."""


class AssignmentError(OffloadError):
    """Raised when an extracted assignment disagrees with the solver beyond any rounding effect."""
