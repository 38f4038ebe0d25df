"""Exception types raised across the package."""


class CutMaxwellError(Exception):
    """Base class for all package errors."""


class DegenerateGradient(CutMaxwellError):
    pass


class NoSignChange(CutMaxwellError):
    pass


class UnknownGeometry(CutMaxwellError):
    pass


class AssumptionViolated(CutMaxwellError):
    """A face is crossed by the boundary more than once at the sampling resolution."""

    def __init__(self, message, face=None):
        super().__init__(message)
        self.face = face


class NoInteriorElement(CutMaxwellError):
    pass


class ProjectionFailed(CutMaxwellError):
    pass


class DimensionMismatch(CutMaxwellError):
    pass


class SingularSystem(CutMaxwellError):
    pass


class NormGramSingular(CutMaxwellError):
    pass


class ParseError(CutMaxwellError):
    pass


class ValidationError(CutMaxwellError):
    pass
