"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument violates a documented precondition."""


class IllConditionedData(RuntimeError):
    """A kernel matrix could not be factorized even after jitter escalation."""


class DomainViolation(ValueError):
    """A query lies outside the domain on which a result is valid."""


class InternalConsistencyError(RuntimeError):
    """A numerical invariant failed beyond the tolerated rounding window."""


class SynthesisFailure(RuntimeError):
    """Gain synthesis could not produce a feasible gain set."""
