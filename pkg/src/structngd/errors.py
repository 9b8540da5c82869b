"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """An argument breaks a documented precondition (wrong structure, asymmetry, ...)."""


class SingularityError(ArithmeticError):
    """A matrix block is numerically singular where invertibility is required."""


class CapabilityError(RuntimeError):
    """A required callback or representation is not available."""


class DomainError(ValueError):
    """A parameter or sample lies outside the distribution's domain."""
