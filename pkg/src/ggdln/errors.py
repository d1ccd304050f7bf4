"""Exception hierarchy shared by all ggdln modules."""


class GgdlnError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(GgdlnError):
    """Array shapes are inconsistent with the operation's contract."""


class NotPSD(GgdlnError):
    """Matrix has an eigenvalue below the negative tolerance."""


class SingularKernel(GgdlnError):
    """Kernel solve failed after jitter escalation (at/above capacity)."""


class ZeroDiagonal(GgdlnError):
    """Kernel diagonal vanishes; normalized kernel undefined."""


class DomainError(GgdlnError):
    """Scalar argument outside the documented domain."""


class Overflow(GgdlnError):
    """Exact integer result exceeds the supported range."""


class BudgetExceeded(GgdlnError):
    """Requested computation exceeds a configured size guard."""


class DegenerateClusters(GgdlnError):
    """A cluster center captured no points even after re-seeding."""


class EmptyMask(GgdlnError):
    """A task mask forbids every gate even after one resample."""


class BadMagic(GgdlnError):
    """IDX file does not start with the expected magic number."""


class TruncatedFile(GgdlnError):
    """IDX file payload is shorter than its header promises."""


class CountMismatch(GgdlnError):
    """IDX image count differs from label count."""


class InsufficientClassSamples(GgdlnError):
    """Not enough samples of some class for a balanced split."""


class NoConvergence(GgdlnError):
    """Iterative procedure did not reach its stopping criterion."""


class TooFewSamples(GgdlnError):
    """Estimator requires more ensemble members or snapshots."""


class Diverged(GgdlnError):
    """Langevin energy exceeded the divergence guard."""
