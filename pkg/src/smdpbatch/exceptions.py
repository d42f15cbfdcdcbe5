"""Exception hierarchy shared by all modules."""


class BatchingError(Exception):
    """Base class for every error raised by smdpbatch."""


class DomainError(BatchingError, ValueError):
    """An argument lies outside the domain of an operation (batch size, action, state)."""


class ConfigError(BatchingError, ValueError):
    """Invalid or inconsistent configuration."""


class StabilityError(BatchingError, ValueError):
    """The traffic intensity is not below one, so no average-cost solve is meaningful."""


class FitError(BatchingError, ValueError):
    """Linear profile regression could not be performed."""


class ModelViolationError(FitError):
    """Fitted coefficients contradict the linear latency/energy model."""


class StructuralError(BatchingError):
    """A policy-induced Markov chain is not unichain."""

    def __init__(self, message, classes=None):
        super().__init__(message)
        self.classes = classes or []


class ExhaustionError(BatchingError):
    """No grid point satisfied the approximation tolerance."""

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records or []


class InstabilityError(BatchingError):
    """A simulation run was aborted because the queue grew without bound."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class PolicyFormatError(ConfigError):
    """A policy file is malformed, incomplete, or contains infeasible actions."""
