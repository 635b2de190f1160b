"""Exception and warning types raised by mixedboot."""

from __future__ import annotations


class MixedBootError(Exception):
    """Base class for all mixedboot errors."""


# data model
class MissingColumn(MixedBootError, ValueError):
    pass


class MissingValue(MixedBootError, ValueError):
    pass


class RankDeficientDesign(MixedBootError, ValueError):
    pass


class EmptyCluster(MixedBootError, ValueError):
    pass


class DimensionMismatch(MixedBootError, ValueError):
    pass


# fitting
class NonFiniteObjective(MixedBootError, ArithmeticError):
    pass


class DidNotConverge(UserWarning):
    """Emitted when no optimizer start met the convergence tolerances."""


# residuals
class SingularClusterDesign(MixedBootError, ValueError):
    def __init__(self, cluster_id, message: str | None = None):
        self.cluster_id = cluster_id
        super().__init__(
            message or f"random-effects design of cluster {cluster_id!r} is not of full column rank"
        )


class SingularEmpiricalCovariance(MixedBootError, ArithmeticError):
    pass


class DegenerateTarget(MixedBootError, ArithmeticError):
    pass


# resampling
class ConfigurationError(MixedBootError, ValueError):
    pass


class LeverageOne(MixedBootError, ArithmeticError):
    pass


class SingularBootstrapCovariance(MixedBootError, ArithmeticError):
    pass


class NonPositiveVarianceComponent(MixedBootError, ValueError):
    pass


class ZeroReplicateMean(MixedBootError, ZeroDivisionError):
    pass


# inference
class InsufficientReplicates(MixedBootError, ValueError):
    pass


class UnknownIntervalType(MixedBootError, ValueError):
    pass


class IncompatibleResults(MixedBootError, ValueError):
    pass


class NotRandomInterceptModel(MixedBootError, ValueError):
    pass


# formula parsing
class FormulaSyntaxError(MixedBootError, ValueError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at character {position})")


class MultipleGroupClauses(MixedBootError, ValueError):
    pass
