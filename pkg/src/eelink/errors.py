"""Exception hierarchy.

Solver-level failures (``SolverDiverged``, ``SingularJacobian``,
``NotIdentified``, ``OverlapViolation``) are the ones a bootstrap draw may
retry on a fresh weight vector; everything else propagates.
"""

from __future__ import annotations


class EELinkError(Exception):
    """Base class for all errors raised by this package."""


class DataValidationError(EELinkError, ValueError):
    """A dataset or weight vector violates its invariants."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class SolverError(EELinkError):
    """A numerical solve failed; bootstrap engines may retry these."""


class SolverDiverged(SolverError):
    pass


class SingularJacobian(SolverError):
    pass


class NotIdentified(SolverError):
    pass


class OverlapViolation(SolverError):
    pass


class DrawFailed(EELinkError):
    """Every retry for one bootstrap draw failed."""

    def __init__(self, draw_id, attempts, last_error):
        super().__init__(
            f"draw {draw_id} failed after {attempts} attempts: {last_error}"
        )
        self.draw_id = draw_id
        self.attempts = attempts
        self.last_error = last_error


class ReplicateFailed(EELinkError):
    def __init__(self, replicate_id, cause):
        super().__init__(f"replicate {replicate_id}: {cause}")
        self.replicate_id = replicate_id
        self.cause = cause


class StudyFailure(EELinkError):
    """More replicates failed than the study tolerates."""


class ConfigError(EELinkError):
    pass


class ParseError(ConfigError):
    pass


class ValidationError(ConfigError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
