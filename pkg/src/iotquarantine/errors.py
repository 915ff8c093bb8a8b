"""Exception types shared across the package."""


class CapacityError(RuntimeError):
    """A bounded resource (flow table, distribution support, enumeration) would overflow."""


class PreconditionError(RuntimeError):
    """An operation was requested in a state that does not allow it."""


class EnvelopeError(ValueError):
    """A closed-form approximation was asked for outside the range where it holds."""
