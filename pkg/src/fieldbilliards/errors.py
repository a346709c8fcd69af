"""Shared exception taxonomy.

Every raisable condition in the package is a subclass of
:class:`FieldBilliardsError` so callers can catch the family in one clause.
Conditions that are *results* rather than failures (e.g. a field failing the
sign certification) are reported through return values; the exceptions here
are for contract violations and numerical breakdowns.
"""


class FieldBilliardsError(Exception):
    """Base class for all package errors."""


class NotOnBoundary(FieldBilliardsError):
    """A point required to lie on the boundary is off it beyond tolerance."""


class DegenerateGradient(FieldBilliardsError):
    """grad xi vanished (or nearly so) where a unit normal was required."""


class OutsideTube(FieldBilliardsError):
    """Point is outside the boundary tube where a projection is defined."""


class OutOfTube(OutsideTube):
    """Alias distinction: moving-frame coordinates requested outside the
    tubular neighborhood of validity."""


class NoConvergence(FieldBilliardsError):
    """An iterative solve (Newton projection, event refinement) failed to
    reach its residual target within the iteration budget."""


class SignViolated(FieldBilliardsError):
    """A quantity whose strict sign an operation relies on had the wrong
    sign (e.g. an uncertified field used where E.n > 0 is required)."""


class MalformedField(FieldBilliardsError):
    """A field specification is structurally invalid (bad kind, non-finite
    values, missing parameters)."""


class StepFailure(FieldBilliardsError):
    """The integrator produced a non-finite state or could not complete a
    step."""


class GrazingStall(FieldBilliardsError):
    """A bounce was located with normal speed below the grazing floor; the
    cycle cannot be continued reliably."""


class MaxBouncesExceeded(FieldBilliardsError):
    """A cycle build hit its bounce budget before reaching the target time."""


class OutOfChart(FieldBilliardsError):
    """Chart coordinates requested for a point outside the chart's range."""


class NearPole(FieldBilliardsError):
    """Chart evaluation requested within the polar exclusion band."""


class SingularMetric(FieldBilliardsError):
    """The chart's first fundamental form lost rank (numerically singular)."""


class MCVarianceTooHigh(FieldBilliardsError):
    """A Monte-Carlo estimate failed its relative-variance target."""


class InsufficientBounces(FieldBilliardsError):
    """An analysis needing at least N bounces received fewer."""


class ConfigError(FieldBilliardsError):
    """A scenario configuration failed validation."""


class SuiteFailure(FieldBilliardsError):
    """A verification suite ran to completion and failed its criterion."""
