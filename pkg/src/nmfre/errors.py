"""Exception types raised across the package."""


class NMFREError(Exception):
    """Base class for all package errors."""


class ParseError(NMFREError, ValueError):
    pass


class DimensionMismatch(NMFREError, ValueError):
    pass


class NegativeData(NMFREError, ValueError):
    pass


class NonFinite(NMFREError, ValueError):
    pass


class SingularSystem(NMFREError, ArithmeticError):
    pass


class DegenerateColumn(NMFREError, ArithmeticError):
    pass


class CapInfeasible(NMFREError, ValueError):
    pass


class NonPositiveDF(NMFREError, ValueError):
    pass


class SingularInformation(NMFREError, ArithmeticError):
    """Reduced information not invertible; ``factor`` names the culprit."""

    def __init__(self, factor, message=None):
        self.factor = factor
        super().__init__(message or f"information factor {factor} is singular")


class SimulationFailure(NMFREError, RuntimeError):
    pass


class NotConverged(NMFREError, RuntimeError):
    pass


class NotConvergedWarning(UserWarning):
    pass
