"""Exception taxonomy shared across the package."""


class SmallDomError(Exception):
    """Base class for all package-specific errors."""


class DataError(SmallDomError):
    """Malformed input data (CSV schema, field values, duplicate ids)."""


class DomainError(SmallDomError):
    """Unknown or empty domain requested."""


class DesignError(SmallDomError):
    """Invalid sampling design or allocation."""


class CalibrationError(SmallDomError):
    """Calibration cell without sampled units, or singular calibration system."""


class FitError(SmallDomError):
    """Model fitting failed (rank deficiency, too few domains, bad weights)."""


class ConvergenceError(FitError):
    """Iterative fit did not converge within the iteration budget."""


class DegenerateScaleError(FitError):
    """Robust scale collapsed to zero while residuals remain non-zero."""


class UsageError(SmallDomError):
    """Command line usage error."""
