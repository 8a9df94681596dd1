"""Exception hierarchy.

Validation problems (bad sizes, bad configuration, offsets the legitimate
receiver could not absorb) derive from :class:`ValidationError`, a
``ValueError``. Numerical failures derive from :class:`NumericalError`, an
``ArithmeticError``. The CLI maps the two families to exit codes 2 and 3.
"""


class ValidationError(ValueError):
    pass


class SizeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ToleranceError(ValidationError):
    """Aggregate frequency offset beyond what the legitimate receiver tolerates."""


class DesignError(ValidationError):
    """Filter specification not met; carries the measured ripple."""

    def __init__(self, message, ripple_db=None):
        super().__init__(message)
        self.ripple_db = ripple_db


class NumericalError(ArithmeticError):
    pass


class UndefinedPhaseError(NumericalError):
    pass


class DegenerateGeometryError(NumericalError):
    pass


class SingularInnovationError(NumericalError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class FrameNotDetectedError(NumericalError):
    pass


class AliasWarning(UserWarning):
    """Frequency offset likely outside the unambiguous range of the correlator."""


class ZeroPilotError(NumericalError):
    """Known pilot sample is zero, so the matched filter cannot normalise."""
