"""Exception types raised by the library.

Each class corresponds to one contract violation; callers can catch the
shared base ``DfmError`` or the specific condition they care about.
"""


class DfmError(ValueError):
    """Base class for all library errors."""


# -- distributions ----------------------------------------------------------

class NegativeWeightError(DfmError):
    """A probability weight was negative."""


class AllZeroError(DfmError):
    """All probability weights were zero."""


class SizeMismatchError(DfmError):
    """Two distributions live on alphabets of different sizes."""


class OutOfAlphabetError(DfmError):
    """A token index fell outside [0, K)."""


class SizeGuardError(DfmError):
    """A tabular object would exceed the desk-scale size cap."""


# -- paths ------------------------------------------------------------------

class BetaOverflowError(DfmError):
    """The softmax sharpness exceeded the floating-point exponent range."""


class DegeneratePathError(DfmError):
    """Geodesic endpoints coincide; no path is defined."""


class ZeroStatisticError(DfmError):
    """Token statistics contain a zero entry where a log is required."""


class SchedulerSingularityError(DfmError):
    """The scheduler reached its terminal value and jump rates diverge."""


# -- velocities -------------------------------------------------------------

class UnsafeFluxError(DfmError):
    """Flux leaves a zero-probability state."""


class SingularSystemError(DfmError):
    """The weighted Laplacian system is singular beyond its constant kernel."""


class InconsistentRHSError(DfmError):
    """The right-hand side of the potential solve does not sum to zero."""


class DivideByZeroTauError(DfmError):
    """A zero reweighting entry coincides with a nonzero time derivative."""


class AlphaOutOfRangeError(DfmError):
    """Power-family exponent below 1."""


class AsymmetricWeightError(DfmError):
    """Corrector weights are not symmetric, so the flux would carry divergence."""


class PosteriorUndefinedError(DfmError):
    """The posterior model is undefined at the requested point."""


class ZeroMarginalError(PosteriorUndefinedError):
    """The joint state is unreachable under the path; the posterior is undefined."""


# -- sampling ---------------------------------------------------------------

class InvalidStepPmfError(DfmError):
    """An Euler step produced a per-coordinate PMF with a negative entry."""


class ConfigError(DfmError):
    """Invalid or inconsistent configuration."""


# -- likelihood -------------------------------------------------------------

class RateSupportMismatchError(DfmError):
    """A conditional jump has positive rate where the marginal rate is zero."""


class KappaCovUnavailableError(DfmError):
    """The stratified change-of-variable estimator is undefined for this scheduler."""
