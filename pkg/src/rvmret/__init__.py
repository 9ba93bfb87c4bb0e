"""Small-data solver and verification suite for the relativistic
kinetic equation coupled to its retarded electromagnetic field.

The package builds the solution by fixed-point iteration: transport the
density along characteristics of the previous field, form its momentum
moments, and evaluate the new field as a retarded integral over the
source history.  Every analytic ingredient of the construction (kernel
identities, light-cone integral bounds, weighted-norm contraction,
far-field decay, vanishing incoming radiation) has a numerical check in
:mod:`rvmret.diagnostics` or the test suite.
"""

from .core import InitialData, a_of_beta, gamma_of_p, p_hat
from .errors import (ConfigError, DomainExceeded, IllConditioned,
                     InfeasibleBudget, NonContraction, NonConvergent,
                     QuadratureDomainViolation, RvmError, ToleranceNotMet)
from .fields import CallableField, FieldTable, OutgoingPulseField, ZeroField
from .picard import IterateRecord, QuadratureSpec, RunResult, run
from .config import RunConfig, load_config, parse_config

__version__ = "0.1.0"

__all__ = [
    "InitialData", "a_of_beta", "gamma_of_p", "p_hat",
    "RvmError", "ConfigError", "DomainExceeded", "IllConditioned",
    "InfeasibleBudget", "NonContraction", "NonConvergent",
    "QuadratureDomainViolation", "ToleranceNotMet",
    "CallableField", "FieldTable", "OutgoingPulseField", "ZeroField",
    "IterateRecord", "QuadratureSpec", "RunResult", "run",
    "RunConfig", "load_config", "parse_config",
    "__version__",
]
