"""Exception hierarchy shared by all modules."""


class WFRError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(WFRError, ValueError):
    """Input data violates a documented invariant (CLI exit code 1)."""


class MismatchedGrids(ValidationError):
    pass


class InvalidCurve(ValidationError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InvalidInterval(ValidationError):
    pass


class InvalidEpsilon(ValidationError):
    pass


class ZeroEnergy(ValidationError):
    pass


class NonAbsolutelyContinuous(ValidationError):
    """A momentum or source entry is nonzero where the density vanishes."""


class EmptyInput(ValidationError):
    pass


class SchemaError(ValidationError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class RangeError(ValidationError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class NonFiniteField(WFRError, ArithmeticError):
    """Field interpolation produced NaN or inf along a trajectory."""


class NoImprovingCurve(WFRError):
    """Raised by the insertion step when no curve decreases the objective."""

    def __init__(self, best_value):
        self.best_value = best_value
        super().__init__(f"best certificate value {best_value:.6g} does not improve")
