"""Exception hierarchy shared across the package."""


class PdefitError(Exception):
    """Base class for all package errors."""


class ConfigError(PdefitError):
    """Invalid configuration: bad grid axes, missing boundary conditions,
    unresolvable presets, schema violations."""


class ShapeError(PdefitError):
    """Array dimension or length mismatch."""


class NumericError(PdefitError):
    """Non-finite values encountered where finite values are required."""


class StiffnessError(PdefitError):
    """Time integration failed: step-size underflow or step budget
    exceeded. Carries the last time that was successfully reached."""

    def __init__(self, message, last_time=None):
        super().__init__(message)
        self.last_time = last_time


class SolveError(PdefitError):
    """Linear system is singular or could not be solved to tolerance."""


class PhysicsError(PdefitError):
    """Physically inadmissible input, e.g. a non-positive diffusion or
    conduction coefficient."""


class StateError(PdefitError):
    """State vector violates a problem's validity constraints
    (negative density, non-positive absolute temperature, ...)."""


class ObservationError(PdefitError):
    """Observation request outside the observable variables, admissible
    nodes, or available times of a problem."""


class EstimationError(PdefitError):
    """Parameter estimation could not proceed (persistent integration
    failure, divergence, empty data)."""
