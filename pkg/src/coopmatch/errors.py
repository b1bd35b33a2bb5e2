"""Exception hierarchy shared by every coopmatch module."""

from __future__ import annotations


class CoopMatchError(Exception):
    """Base class for all library errors."""


class NotConnected(CoopMatchError):
    """The follower submatrix H is not positive definite."""


class SynthesisFailure(CoopMatchError):
    """A gain computation did not produce a certified result."""


class InvalidPoles(CoopMatchError):
    pass


class InvalidParameter(CoopMatchError, ValueError):
    pass


class BoundViolation(CoopMatchError):
    """The leader input left the declared interval ``|v| <= l``."""


class MissingNeighborData(CoopMatchError):
    pass


class NotApplicable(CoopMatchError):
    pass


class NumericBlowup(CoopMatchError):
    """A state norm exceeded the divergence threshold.

    Attributes:
        time: Simulation time at which the threshold was crossed.
        trace: Partial trace recorded up to (and including) that time.
    """

    def __init__(self, message: str, time: float, trace=None):
        super().__init__(message)
        self.time = time
        self.trace = trace


class ParseError(CoopMatchError):
    """A scenario document is malformed."""


class ValidationError(CoopMatchError):
    """A scenario parsed but violates a modelling assumption.

    Attributes:
        assumption: Short name of the violated assumption, e.g.
            ``"graph_connectivity"`` or ``"relative_degree"``.
        field: Dotted path of the offending field, when known.
    """

    def __init__(self, message: str, assumption: str | None = None, field: str | None = None):
        super().__init__(message)
        self.assumption = assumption
        self.field = field
