"""Exception hierarchy. Every error carries a short machine-readable name."""


class QSEError(Exception):
    """Base class for all library errors."""


class ConfigError(QSEError):
    pass


class NumericError(QSEError):
    pass


class NonStochasticRow(ConfigError):
    pass


class RewardOutOfRange(ConfigError):
    pass


class BadDimension(ConfigError):
    pass


class DimensionMismatch(ConfigError):
    pass


class ResponseMismatch(ConfigError):
    pass


class InfeasibleConstraint(ConfigError):
    pass


class SupportMismatch(NumericError):
    pass


class EmptyGrid(ConfigError):
    pass


class EmptyThetaSample(ConfigError):
    pass


class NotMyopic(ConfigError):
    pass


class EmptyData(ConfigError):
    pass


class NonConvergence(NumericError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


class ZeroTransitionProbability(NumericError):
    pass


class EmptyConfidenceSet(NumericError):
    pass


class EmptyModelSet(NumericError):
    pass


class MissingAggregate(ConfigError):
    pass


class TooLarge(ConfigError):
    pass
