"""Exception types raised across the package."""


class QuasiSPDEError(Exception):
    """Base class for all package errors."""


class UnresolvableScale(QuasiSPDEError, ValueError):
    """A mollifier or test-function scale is too small for the grid."""


class GridMismatch(QuasiSPDEError, ValueError):
    """Two fields or a field and a kernel live on different grids."""


class EllipticityViolation(QuasiSPDEError, ValueError):
    """A coefficient matrix fails the uniform ellipticity bound."""


class NonpositiveTime(QuasiSPDEError, ValueError):
    """A heat kernel was evaluated at t <= 0."""


class OriginSingularity(QuasiSPDEError, ValueError):
    """A time-integrated kernel was evaluated at y = 0, where it diverges."""


class DimensionMismatch(QuasiSPDEError, ValueError):
    """Vector and covariance sizes disagree."""


class InstabilityDetected(QuasiSPDEError, RuntimeError):
    """The time stepper produced a non-finite or explosively growing state."""


class UnknownVertex(QuasiSPDEError, KeyError):
    """A subset refers to a vertex that is not in the diagram."""


class TooLarge(QuasiSPDEError, ValueError):
    """Exhaustive subset enumeration refused for too many vertices."""


class ParseError(QuasiSPDEError, ValueError):
    """Malformed diagram file. Carries the offending line number."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ConfigError(QuasiSPDEError, ValueError):
    """Invalid or incomplete experiment configuration."""

    def __init__(self, message, key=None, lineno=None):
        self.key = key
        self.lineno = lineno
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if lineno is not None:
            where.append(f"line {lineno}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class MalformedDiagram(QuasiSPDEError, ValueError):
    """A labelled diagram breaks one of its structural rules."""


class StatisticalQualityWarning(UserWarning):
    """A Monte-Carlo estimate is too noisy for the decision it feeds."""
