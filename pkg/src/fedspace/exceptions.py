class FedSpaceError(Exception):
    """Base class for errors raised by fedspace."""


class ModelEvaluationError(FedSpaceError, ArithmeticError):
    """A model could not evaluate a statistic, a parameter or its objective."""


class DegenerateComponentError(ModelEvaluationError):
    """A mixture component received (numerically) zero weight in the M-step."""


class InconsistentStateError(FedSpaceError, RuntimeError):
    """Server memory no longer equals the mean of the worker memories."""


class ConfigError(FedSpaceError, ValueError):
    """Invalid experiment configuration.

    ``errors`` lists every problem found, each prefixed with its key path.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class RunAborted(FedSpaceError, RuntimeError):
    """A simulation failed part-way; ``trace`` holds the rows produced so far."""

    def __init__(self, trace, cause):
        self.trace = trace
        self.cause = cause
        super().__init__(f"run aborted after {len(trace)} rows: {cause}")
