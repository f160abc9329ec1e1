"""Exception hierarchy shared by all curvflow modules."""


class CurvflowError(Exception):
    pass


class InvalidSpec(CurvflowError, ValueError):
    """A speed-function descriptor violates a structural invariant."""


class ArityMismatch(InvalidSpec):
    pass


class DomainError(CurvflowError, ValueError):
    """An argument lies outside the positive cone."""


class ConvergenceFailure(CurvflowError, RuntimeError):
    pass


class DegenerateSpectrum(CurvflowError, ValueError):
    pass


class InvalidSpectrum(CurvflowError, ValueError):
    pass


class ShapeMismatch(CurvflowError, ValueError):
    pass


class NonConvexShape(CurvflowError, ValueError):
    pass


class ConvexityLost(CurvflowError, RuntimeError):
    pass


class StabilityFailure(CurvflowError, RuntimeError):
    pass
