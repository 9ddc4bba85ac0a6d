"""Exception types shared across the package."""


class MMSOLDError(Exception):
    """Base class for all package-specific errors."""


class NotPositiveDefinite(MMSOLDError):
    """A matrix required to be symmetric positive-definite is not."""


class SingularCholesky(NotPositiveDefinite):
    """A Cholesky factor needed for whitening is singular or unavailable."""


class NoConvergence(MMSOLDError):
    """An iterative solver exhausted its iteration budget."""


class RankDeficient(MMSOLDError):
    """A matrix expected to have full column rank has (numerically) collapsed."""


class IllConditioned(MMSOLDError):
    """A linear solve was refused because the operator is too ill-conditioned."""


class InvalidBudget(MMSOLDError):
    """A neighbor/correction budget is infeasible for the dataset size."""


class DegenerateDenominator(MMSOLDError):
    """A softmax normalizer underflowed to zero; the query is far outside the
    data support at the given component bandwidth."""


class NonFiniteState(MMSOLDError):
    """A sampler state picked up NaN/Inf entries (step size too large)."""


class ParseError(MMSOLDError):
    """A CSV file could not be parsed."""


class DimensionMismatch(MMSOLDError):
    """Arrays that must share a dimension do not."""
