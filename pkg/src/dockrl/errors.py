"""Exception hierarchy shared across the package."""


class DockError(Exception):
    """Base class for all package errors."""


class DynamicsInputError(DockError, ValueError):
    """Non-finite or malformed input to a dynamics routine."""


class ParameterError(DockError, ValueError):
    """Invalid physical or algorithm parameters."""


class IntegrationError(DockError, RuntimeError):
    """Bad step size or a non-finite integration result."""


class NumericError(DockError, ArithmeticError):
    """A numerical routine failed to converge."""


class SolverError(DockError, RuntimeError):
    """QP problem malformed or solver failure."""


class ConfigError(DockError, ValueError):
    """Scenario or run configuration is invalid."""


class EpisodeError(DockError, RuntimeError):
    """Acting on an episode that is finished or was never reset."""


class DivergenceError(DockError, FloatingPointError):
    """Training produced non-finite losses or gradients."""
