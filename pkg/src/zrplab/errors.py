"""Exception types shared across the package."""


class ZRPError(Exception):
    pass


class DomainError(ZRPError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigurationError(ZRPError, ValueError):
    """A scenario or coupling request is inconsistent (e.g. lambda > rho)."""


class ResourceError(ZRPError, MemoryError):
    pass


class TruncationRiskError(ZRPError, RuntimeError):
    """A tracked defect came too close to the right edge of the window."""


class InvariantViolation(ZRPError, AssertionError):
    """Internal bookkeeping broke an invariant that the dynamics guarantee."""
