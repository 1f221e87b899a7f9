"""Exception types raised across the simulator."""


class SimulatorError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(SimulatorError):
    """An argument violates an operation's precondition."""


class InvalidConfig(SimulatorError):
    """A configuration value or combination is unusable."""


class Singularity(SimulatorError):
    """Evaluation requested at a point where the schedule diverges (t <= 0)."""


class DegenerateInput(SimulatorError):
    """Input is structurally valid but numerically degenerate (e.g. zero norm)."""


class InvalidComparison(SimulatorError):
    """Two traces were compared that do not share a scene/schedule config."""


class InternalError(SimulatorError):
    """A state that module contracts should make unreachable."""
