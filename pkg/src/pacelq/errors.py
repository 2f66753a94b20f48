"""Exception types shared across the package."""


class PaceLqError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(PaceLqError):
    """Operands have inconsistent shapes."""


class NonHurwitzDrift(PaceLqError):
    """A Lyapunov solve was requested with an unstable drift matrix."""


class SingularSystem(PaceLqError):
    """A dense linear system was numerically rank-deficient."""


class NoStabilizingSolution(PaceLqError):
    """No stabilizing Riccati solution could be computed."""


class NoConvergence(PaceLqError):
    """An iterative solve hit its iteration cap.

    The best iterate seen is attached as ``best`` so callers can decide
    whether a flagged, non-converged result is still usable.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class NonFiniteState(PaceLqError):
    """A simulated state left the representable range."""


class NonMonotoneTime(PaceLqError):
    """A history record arrived with a non-increasing timestamp."""


class InfeasibleInitialization(PaceLqError):
    """Initial belief state does not admit stabilizing gain predictions."""


class UnknownScenario(PaceLqError):
    """Requested scenario name is not registered."""


class ZeroTrueParameter(PaceLqError):
    """Percent error is undefined for a true parameter equal to zero."""


class ConfigError(PaceLqError):
    """Experiment configuration file is malformed or inconsistent."""
