"""Exception types shared across the package."""

from __future__ import annotations


class InvalidStateError(ValueError):
    """A composition, fraction vector, or field violates its domain."""


class FixedPointError(RuntimeError):
    """The scalar fixed point behind the w -> x inversion did not converge."""


class NonConvergenceError(RuntimeError):
    """Damped Newton failed, even after time-step halving."""

    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class SolverError(RuntimeError):
    """A linear solve or post-solve check (e.g. divergence) failed."""


class ConfigError(ValueError):
    """Configuration text failed parsing or semantic validation."""


class SimulationAbort(RuntimeError):
    """A sub-step failed mid-run; carries the last good state."""

    def __init__(self, message: str, state=None, step: int = -1, cause: Exception | None = None):
        super().__init__(message)
        self.state = state
        self.step = step
        self.cause = cause
