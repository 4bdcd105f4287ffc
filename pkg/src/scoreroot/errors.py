"""Exception types shared across the package."""


class ScorerootError(Exception):
    """Base class for all package errors."""


class SingularMatrix(ScorerootError):
    """Linear solve hit a pivot too small to trust."""


class NonFiniteGradient(ScorerootError):
    """A reverse pass produced NaN or infinity."""


class NonFiniteLoss(ScorerootError):
    """A training loss evaluated to NaN or infinity."""


class DimensionMismatch(ScorerootError):
    """Input dimensions disagree with a network or dataset spec."""


class InvalidParameter(ScorerootError):
    """Simulator parameter outside its valid domain."""


class NoOracle(ScorerootError):
    """An analytic score oracle was required but not available."""


class Diverged(ScorerootError):
    """Root iteration escaped the trust region.

    Carries the partial ``EstimateResult`` as ``.result`` when available.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class MaxIterations(ScorerootError):
    """Root iteration hit the iteration cap without converging.

    Carries the partial ``EstimateResult`` as ``.result``.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class TooFewDraws(ScorerootError):
    """Not enough converged bootstrap replicates to form quantiles."""


class TooManyFailures(ScorerootError):
    """Per-replicate failure budget exceeded."""


class DegenerateFit(ScorerootError):
    """Quadratic regression design matrix is rank-deficient."""


class ParseError(ScorerootError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class TooFewRows(ScorerootError):
    """Input dataset below the minimum supported size."""


class ConfigError(ScorerootError):
    """Invalid configuration file or option."""
