from __future__ import annotations

import math
from enum import Enum
from typing import NamedTuple

import numpy as np


class LossKind(str, Enum):
    LOGISTIC = "logistic"
    EXPONENTIAL = "exponential"
    CORRELATION = "correlation"

    @property
    def bounded_below(self) -> bool:
        """Whether the loss meets the lower-bound part of the smoothness assumption.

        The correlation loss is unbounded below, so descent-lemma guarantees are
        void for it.
        """
        return self is not LossKind.CORRELATION


class LossConstants(NamedTuple):
    m0: float  # Lipschitz constant of the derivative on the interval
    m1: float  # bound on |derivative| on the interval


def loss_value(kind: LossKind, u: np.ndarray | float) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if kind is LossKind.LOGISTIC:
        return np.logaddexp(0.0, -u)
    if kind is LossKind.EXPONENTIAL:
        return np.exp(-u)
    return -u


def loss_derivative(kind: LossKind, u: np.ndarray | float) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if kind is LossKind.LOGISTIC:
        # -1 / (1 + e^u), written through tanh so it never overflows
        return -0.5 * (1.0 - np.tanh(0.5 * u))
    if kind is LossKind.EXPONENTIAL:
        return -np.exp(-u)
    return -np.ones_like(u)


def loss_constants(kind: LossKind, bound: float) -> LossConstants:
    """Constants of the loss on the interval [-bound, bound].

    ``bound`` is max_i ||v|| max_t ||x_it||, which contains every Y_i f(X_i).
    """
    if kind is LossKind.LOGISTIC:
        return LossConstants(m0=0.25, m1=1.0)
    if kind is LossKind.EXPONENTIAL:
        scale = math.exp(bound)
        return LossConstants(m0=scale, m1=scale)
    return LossConstants(m0=0.0, m1=1.0)
