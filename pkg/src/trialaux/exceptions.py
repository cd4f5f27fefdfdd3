"""Exception and warning types shared across the package."""


class TrialAuxError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(TrialAuxError, ValueError):
    """A scenario or generator configuration is invalid."""


class DataStateError(TrialAuxError, RuntimeError):
    """A dataset cannot support the requested operation in its current state."""


class InsufficientDataError(DataStateError):
    """Too few usable observations for the requested fit."""


class EmptyStratumError(DataStateError):
    """A required stratum contains no observations."""


class SingularDesignError(TrialAuxError, ValueError):
    """Design matrix is rank deficient.

    Attributes
    ----------
    column : int
        Index of the first offending design column.
    """

    def __init__(self, message, column):
        super().__init__(message)
        self.column = int(column)


class DegenerateVarianceError(TrialAuxError, ValueError):
    """A variance that must be positive is zero or negative."""


class AdaptationError(TrialAuxError, RuntimeError):
    """Proposal adaptation failed (e.g. every proposal rejected)."""


class ConvergenceError(TrialAuxError, RuntimeError):
    """MCMC diagnostics outside acceptable bounds.

    Attributes
    ----------
    result : object
        The sampler output (draws and diagnostics) for post-mortem inspection.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class TrialAuxWarning(UserWarning):
    """Base warning category; ``--strict`` escalates these to errors."""
