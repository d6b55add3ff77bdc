"""Shared exception types."""


class ContractViolation(ValueError):
    """A documented precondition of an operator was violated by the caller."""


class DegenerateKernelMatrix(ValueError):
    """The regularised kernel matrix is not positive definite."""


class NumericalInstability(RuntimeError):
    """A computed quantity left its mathematically valid range by more than
    round-off tolerance (e.g. a strongly negative predictive variance)."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class FixtureError(ValueError):
    """An environment fixture file is missing or fails validation."""
