class RicprobeError(Exception):
    """Base class for all errors raised by the toolkit."""


class PreconditionError(RicprobeError, ValueError):
    pass


class DegenerateTransportError(RicprobeError):
    pass


class StepTooLargeError(RicprobeError):
    pass


class OutsideDomainError(RicprobeError, ValueError):
    """A point lies where the conformal factor vanishes."""


class InvalidBoundError(RicprobeError, ValueError):
    pass


class DiscardBudgetError(RicprobeError):
    pass


class ConditioningError(RicprobeError):
    pass


class FitError(RicprobeError):
    pass


class BudgetError(RicprobeError):
    pass


class ConfigError(RicprobeError, ValueError):
    pass
