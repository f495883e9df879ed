"""Exception types raised across the package."""


class BenkError(ValueError):
    """Base class for domain errors."""


class NoAdmissiblePairs(BenkError):
    pass


class InsufficientControls(BenkError):
    pass


class AllAnchorsCensored(BenkError):
    pass


class NonFiniteLoss(BenkError):
    pass


class Degenerate(BenkError):
    """Raised when a model cannot be fitted because the data carry no events."""


class NonConvergence(BenkError):
    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class NoUncensored(BenkError):
    pass


class AllValidationCensored(BenkError):
    pass


class StaleCache(BenkError):
    pass
