"""Safe goal-driven exploration under stochastic dynamics.

A library, simulator and benchmark harness for exploring unknown
environments whose safety field is learned online with Gaussian
processes while transitions are stochastic.  Ships discrete
fixed-point safe-set operators, a continuous moment-matched
relaxation, an object-interaction variant, two simulated worlds and a
seeded experiment harness with a CLI.
"""

__version__ = "0.1.0"

from .errors import (
    ContractViolation,
    DegenerateKernelMatrix,
    FixtureError,
    ConfigError,
    NumericalInstability,
)

__all__ = [
    "ContractViolation",
    "DegenerateKernelMatrix",
    "FixtureError",
    "ConfigError",
    "NumericalInstability",
    "__version__",
]
