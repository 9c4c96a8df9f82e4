"""Exception hierarchy shared across the toolkit."""


class FdpgError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(FdpgError, ValueError):
    """An argument violates a documented precondition."""


class SupportMismatchError(FdpgError):
    """Two finite distributions were combined over different supports."""


class CapacityError(FdpgError):
    """A sequence space exceeds the configured enumeration cap."""


class DegenerateTargetError(FdpgError):
    """A target distribution has an empty support."""


class UnknownContextError(FdpgError, KeyError):
    """A context identifier is not part of the conditional task."""


class InfinitePseudoRewardError(FdpgError):
    """f'(inf) is infinite but the target puts zero mass where the policy does not.

    Raised eagerly so that incompatible (divergence, target) pairs fail before
    any optimizer step runs.
    """

    def __init__(self, divergence: str, detail: str = ""):
        self.divergence = divergence
        msg = (
            f"{divergence} has an infinite pseudo-reward on zero-mass target "
            f"points and cannot be used against this target"
        )
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class EstimatorStateError(FdpgError):
    """Running estimator state is unusable (e.g. non-positive partition estimate)."""


class InfeasibleMomentError(FdpgError):
    """A desired feature moment lies outside the achievable hull."""


class MomentFitError(FdpgError):
    """The moment-matching solver did not converge within its iteration cap."""

    def __init__(self, residual, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"moment matching did not converge after {iterations} iterations; "
            f"max residual {max(abs(r) for r in residual):.3e}"
        )


class NonFiniteGradientError(FdpgError):
    """A gradient contained NaN or infinity; the optimizer step is aborted."""


class TrainAbortedError(FdpgError):
    """Training stopped mid-run; carries the failing step and the cause."""

    def __init__(self, step: int, cause: Exception):
        self.step = step
        self.cause = cause
        super().__init__(f"training aborted at step {step}: {cause}")


class ConfigError(FdpgError):
    """A config file could not be parsed or validated.

    ``location`` is a human-readable pointer (file:line or section.key).
    """

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)
