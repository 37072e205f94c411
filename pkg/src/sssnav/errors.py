"""Exception types raised by the navigation toolkit."""


class SSSNavError(Exception):
    """Base class for all toolkit errors."""


class AltitudeExceedsRange(SSSNavError, ValueError):
    """Vehicle altitude is at or above the sonar's maximum slant range."""


class InvalidLandmark(SSSNavError, ValueError):
    pass


class NonPositiveDt(SSSNavError, ValueError):
    pass


class NoCrossing(SSSNavError):
    """The ping footprint does not intersect the landmark (h1 = 0)."""


class TooLargeForEnumeration(SSSNavError):
    pass


class SingularCovariance(SSSNavError, ArithmeticError):
    pass


class NonPositiveDefinite(SSSNavError, ArithmeticError):
    pass


class DegenerateWeights(SSSNavError, ArithmeticError):
    """Every particle received zero likelihood."""


class MisalignedSeries(SSSNavError, ValueError):
    pass


class ConfigError(SSSNavError, ValueError):
    pass


class SchemaError(SSSNavError, ValueError):
    pass


class FilterStepError(SSSNavError):
    """Wraps an error raised while processing a particular filter step."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")
        self.step = step
        self.cause = cause
