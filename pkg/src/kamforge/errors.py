"""Exception types raised by the solver and the iteration driver."""


class KamforgeError(Exception):
    pass


class SmallDivisorError(KamforgeError):
    """A required divisor failed its lower bound."""

    def __init__(self, ell, shift_kind, value, threshold):
        self.ell = ell
        self.shift_kind = shift_kind
        self.value = value
        self.threshold = threshold
        super().__init__(
            f"small divisor at l={ell} ({shift_kind}): |{value:.3e}| < {threshold:.3e}"
        )


class NotInXError(KamforgeError):
    """Input has support outside the removable subspace at the given cutoff."""


class TriangularityViolation(KamforgeError):
    """The upper-triangular operator failed to be nilpotent at the block count."""


class SmallnessViolated(KamforgeError):
    """A step smallness condition failed; the step was refused."""


class CompatViolation(KamforgeError):
    """A change-of-variables hook broke the decomposition-preservation identities."""


class NoContraction(KamforgeError):
    """A fixed-point inversion failed to contract."""
