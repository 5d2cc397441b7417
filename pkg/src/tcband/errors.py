"""Exception taxonomy shared across the package.

The CLI maps these onto distinct exit codes, so solvers should raise the
most specific class that applies instead of a bare ValueError whenever the
failure is a runtime/numerical condition rather than a caller bug.
"""


class TcbandError(Exception):
    """Base class for package-specific failures."""


class ConfigError(TcbandError):
    """Bad or unknown configuration input (CLI exit code 2)."""


class ValidationFailure(TcbandError):
    """Model/claim admissibility validation failed (CLI exit code 3)."""


class NumericError(TcbandError):
    """A numerical routine failed to converge or lost stability (exit 4)."""


class QuadratureError(NumericError):
    """Quadrature did not converge; carries the best available estimate."""

    def __init__(self, message, estimate=None, error_bound=None):
        super().__init__(message)
        self.estimate = estimate
        self.error_bound = error_bound


class DegenerateBandError(NumericError):
    """The no-trade band has zero width at the query point."""


class ResolutionError(NumericError):
    """Lattice too coarse to resolve the no-trade band."""


class CheckFailure(TcbandError):
    """An acceptance/verification check failed (CLI exit code 5)."""
