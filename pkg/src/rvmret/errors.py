"""Exception types shared across the solver and verification modules."""


class RvmError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(RvmError):
    """Malformed run configuration (unknown keys, bad types, bad ranges)."""


class NonUnitDirection(RvmError):
    """A direction vector expected to be unit length is not."""


class DomainExceeded(RvmError):
    """A trajectory or probe left the tabulated field domain under strict policy."""


class ToleranceNotMet(RvmError):
    """An internal consistency check exceeded its declared tolerance."""


class QuadratureDomainViolation(RvmError):
    """Integrand mass detected on the boundary of a quadrature box."""


class NonContraction(RvmError):
    """Successive iterate differences stopped decreasing."""


class InfeasibleBudget(RvmError):
    """The chained space-time domain exceeds the configured memory ceiling."""


class IllConditioned(RvmError):
    """A least-squares fit has an unusable design matrix."""


class NonConvergent(RvmError):
    """A light-cone integral was requested outside its convergence range."""


class SingularAtOrigin(RvmError):
    """The shell reduction formula was used at |x| = 0 with fallback off."""
