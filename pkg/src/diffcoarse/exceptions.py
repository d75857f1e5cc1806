"""Exception hierarchy shared by all modules."""


class DiffCoarseError(Exception):
    """Base class for errors raised by this package."""


class DomainError(DiffCoarseError, ValueError):
    """An argument lies outside the domain of the operation."""


class CapacityError(DiffCoarseError, ValueError):
    """A truncation order or expansion size exceeds what can be handled."""


class StepRejectedError(DiffCoarseError, ArithmeticError):
    """An integration step drifted the conserved mass beyond tolerance."""


class AbsorbedStateError(DiffCoarseError):
    """A stochastic process ran out of interacting particles."""


class SingularityError(DiffCoarseError, ValueError):
    """A characteristic function was evaluated on its singular set.

    Attributes
    ----------
    location : complex
        Position of the offending singularity (or cut point).
    kind : str
        ``"pole"`` or ``"branch"``.
    """

    def __init__(self, message, location=None, kind=None):
        super().__init__(message)
        self.location = location
        self.kind = kind


class EstimationError(DiffCoarseError, ValueError):
    """A rate or tail estimate could not be formed from the data."""


class ConfigError(DiffCoarseError, ValueError):
    """A run configuration failed validation."""
