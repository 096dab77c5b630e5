"""Exception types shared across the package."""


class EmdfitError(Exception):
    """Base class for all library errors."""


class InputError(EmdfitError, ValueError):
    """Invalid data passed to a solver, generator, or parser."""


class ConfigError(EmdfitError, ValueError):
    """Invalid structural configuration (dimensions, group sizes, options)."""


class NumericalError(EmdfitError, RuntimeError):
    """A computation failed numerically (underflow, non-convergence)."""


class DivergenceError(NumericalError):
    """An optimization loop diverged; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
