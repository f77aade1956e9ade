"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class MIProbeError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class UsageError(MIProbeError, ValueError):
    """Invalid arguments, configuration, or call order."""

    exit_code = 2


class DimensionError(UsageError):
    """Array shapes do not line up."""


class DegenerateInputError(UsageError):
    """Input is too small to carry out the requested operation."""


class NumericError(MIProbeError, ArithmeticError):
    """A computation produced NaN/Inf or otherwise diverged.

    ``history`` carries whatever loss trace was available when it happened.
    """

    exit_code = 3

    def __init__(self, message: str, history=None, **diagnostics):
        super().__init__(message)
        self.history = list(history) if history is not None else []
        self.diagnostics = diagnostics


class PartialProbeError(MIProbeError):
    """Too many per-sample estimates failed during a probe run."""

    exit_code = 4

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
