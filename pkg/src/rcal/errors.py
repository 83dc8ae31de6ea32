"""Exception types raised by the library."""


class RcalError(Exception):
    """Base class for all library errors."""


class EmptyDesign(RcalError):
    pass


class NonFinite(RcalError):
    pass


class DimensionMismatch(RcalError, ValueError):
    pass


class DomainError(RcalError, ValueError):
    pass


class PreconditionViolated(RcalError, ValueError):
    pass


class DegenerateTreatment(RcalError, ValueError):
    """Treatment vector has a single arm."""


class DegenerateWeights(RcalError, ValueError):
    """A fitted propensity in the relevant arm saturated at 0 or 1."""


class ZeroVariance(RcalError, ValueError):
    pass


class ArmTooSmall(RcalError, ValueError):
    pass


class NoViableLambda(RcalError):
    """Every value on the tuning grid failed in some fold."""


class ConfigError(RcalError, ValueError):
    pass
