"""Exception hierarchy shared across the package."""


class LongFactorError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LongFactorError, ValueError):
    """Model specification, options or array shapes are inconsistent."""


class InputError(LongFactorError, ValueError):
    """An input file or array failed validation."""


class NumericError(LongFactorError, ArithmeticError):
    """A numerical routine produced non-finite values or a singular system."""


class RankDeficiencyError(NumericError):
    """A design matrix required to be of full column rank is not."""


class UnsupportedInitError(LongFactorError):
    """The SVD start-value algorithm does not support the requested setting."""


class UndefinedMetricError(LongFactorError, ValueError):
    """A metric is undefined for the supplied data (e.g. no positives)."""
