"""Exception hierarchy shared by every cometrisk module."""


class CometRiskError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CometRiskError, ValueError):
    """A parameter set or lookup refers to something that is not configured."""


class DomainError(CometRiskError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class AccountNotFoundError(CometRiskError, KeyError):
    pass


class NotLiquidatableError(CometRiskError):
    pass


class InsufficientInventoryError(CometRiskError):
    pass


class SaleClosedError(CometRiskError):
    """Collateral sales are closed while reserves sit at or above target."""


class SupplyCapExceededError(CometRiskError):
    pass


class GarchFitError(CometRiskError):
    """Quasi-MLE did not converge; ``best`` holds the best spec found so far."""

    def __init__(self, message, best=None, nll=None):
        super().__init__(message)
        self.best = best
        self.nll = nll


class ValidationError(CometRiskError, ValueError):
    """File validation failed. ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))
