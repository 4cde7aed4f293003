from __future__ import annotations


class AttnMarginError(Exception):
    """Base class for every error raised by attn_margin."""


class InvalidInputError(AttnMarginError, ValueError):
    pass


class DimensionMismatchError(InvalidInputError):
    pass


class ModeError(AttnMarginError):
    """A W-parameterized operation was called on p-only parameters."""


class BudgetExceededError(AttnMarginError):
    pass


class AmbiguousProfileError(AttnMarginError):
    """The selected tokens of a direction are not unique."""


class SolverStatusError(AttnMarginError):
    """An operation needs an Optimal SVM solution and got something else."""


class InvariantViolationError(AttnMarginError):
    pass


class UnknownScenarioError(AttnMarginError):
    pass
