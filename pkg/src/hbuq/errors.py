"""Exception types raised across the package."""


class HbuqError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(HbuqError, ValueError):
    pass


class NonPositiveDefinite(HbuqError, ValueError):
    pass


# the hyper layer uses this name for the same condition
NotPositiveDefinite = NonPositiveDefinite


class NonConvergence(HbuqError, RuntimeError):
    """Iterative solver stopped without meeting its tolerance.

    ``result`` carries the best iterate when one exists.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class InvalidConfig(HbuqError, ValueError):
    pass


class InsufficientData(HbuqError, ValueError):
    pass


class ParseError(HbuqError, ValueError):
    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + loc)
        self.line = line
        self.column = column


class SchemaError(HbuqError, ValueError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class DegenerateFit(HbuqError, ValueError):
    pass


class InfeasibleStart(HbuqError, ValueError):
    pass


class IndefiniteHessian(HbuqError, ValueError):
    pass


class SingularBlock(HbuqError, ValueError):
    pass


class TooFewSegments(HbuqError, ValueError):
    pass


class ExcessiveRejection(HbuqError, RuntimeError):
    pass


class ImproperDensity(HbuqError, ValueError):
    pass


class MissingArtifacts(HbuqError, FileNotFoundError):
    pass
