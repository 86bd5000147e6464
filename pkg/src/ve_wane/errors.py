"""Exception types shared across the package."""


class VeWaneError(Exception):
    """Base class for all package-specific errors."""


class ConvergenceError(VeWaneError):
    """An iterative fit failed to converge within its iteration budget."""

    def __init__(self, message, gradient_norm=None, trace=None):
        super().__init__(message)
        self.gradient_norm = gradient_norm
        self.trace = trace


class SeparationError(ConvergenceError):
    """A binary-regression likelihood is maximized at infinity."""


class SingularModelError(VeWaneError):
    """A design or information matrix is rank deficient."""


class PositivityError(VeWaneError):
    """A stabilized weight requires division by an estimated zero probability."""


class IdentifiabilityError(VeWaneError):
    """The data cannot identify one or more model coordinates."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class DegenerateRiskSetError(VeWaneError):
    """A counting-process jump occurred with zero weighted at-risk mass."""


class StudyError(VeWaneError):
    """A Monte Carlo study failed at the study level."""
