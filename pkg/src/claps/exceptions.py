"""Exception hierarchy shared by all claps modules."""


class ClapsError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(ClapsError, ValueError):
    pass


class NotSymmetric(ClapsError, ValueError):
    pass


class NotPositiveDefinite(ClapsError, ValueError):
    """A Cholesky pivot was not strictly positive."""


class DegenerateDof(ClapsError, ValueError):
    """Evidence iteration left too few effective degrees of freedom (n - gamma <= 1)."""


class IncompatibleHeadLoss(ClapsError, ValueError):
    pass


class EmptyData(ClapsError, ValueError):
    pass


class NonpositiveScale(ClapsError, ValueError):
    pass


class NegativeQ(ClapsError, ValueError):
    pass


class EmptyCalibration(ClapsError, ValueError):
    pass


class EmptySplit(ClapsError, ValueError):
    pass


class LengthMismatch(ClapsError, ValueError):
    pass


class TooFewPoints(ClapsError, ValueError):
    pass


class GridExceedsData(ClapsError, ValueError):
    pass


class NoNumericColumns(ClapsError, ValueError):
    pass


class TargetMissing(ClapsError, KeyError):
    pass


class TooSmall(ClapsError, ValueError):
    pass


class EmptyInput(ClapsError, ValueError):
    pass


class InvalidCounts(ClapsError, ValueError):
    pass


class TooFewSeeds(ClapsError, ValueError):
    pass


class ConfigInvalid(ClapsError, ValueError):
    """Raised with a message that names the offending config field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
