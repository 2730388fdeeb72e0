"""Exception hierarchy shared across the toolkit."""


class NelsonKitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(NelsonKitError):
    """A config file violates the documented schema (CLI exit code 2)."""


class PreconditionError(NelsonKitError):
    """A stage precondition is violated, e.g. an energy sitting on a
    threshold or a model failing a standing hypothesis (exit code 3)."""


class DomainError(NelsonKitError):
    """Evaluation requested at a declared singularity of a dispersion."""


class SizingError(NelsonKitError):
    """A truncated basis would exceed the configured dimension cap."""


class SolverError(NelsonKitError):
    """An eigensolver failed to meet its residual guarantee (exit code 4)."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class ResolutionError(NelsonKitError):
    """The calibration cascade shrank a width below the resolution floor.

    Carries the name of the violated cascade step.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SupportError(NelsonKitError):
    """A vector field is nonzero too close to the momentum box boundary."""


class RangeError(NelsonKitError):
    """Evaluation outside the traced-plus-extrapolated shell range."""
