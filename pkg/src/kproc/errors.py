"""Exception hierarchy for kproc."""


class KProcError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(KProcError, ValueError):
    """A parameter family or argument failed validation."""


class NonPositiveParameter(ValidationError):
    pass


class DivergentMass(ValidationError):
    pass


class SummableWeights(ValidationError):
    pass


class NegativeC(ValidationError):
    pass


class LambdaOfInfinity(ValidationError):
    pass


class NonPositiveDelta(ValidationError):
    pass


class NonPositiveWindow(ValidationError):
    pass


class BeyondWindow(KProcError):
    """A clock query fell outside the sampled sigma window."""


class StateOutsideCutoff(ValidationError):
    pass


class EmptyCutoff(ValidationError):
    pass


class OutOfHorizon(KProcError, IndexError):
    pass


class OrderingViolation(KProcError):
    """Consecutive retained marks collapse onto one clock interval; shrink epsilon."""


class GridTooCoarse(KProcError):
    pass


class PositiveC(ValidationError):
    """Generator machinery is only defined here for c = 0."""


class UnbalanceableSupport(KProcError):
    pass
