import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st

from attn_margin.losses import LossKind, loss_constants, loss_derivative, loss_value


def test_logistic_at_zero():
    assert loss_value(LossKind.LOGISTIC, 0.0) == pytest.approx(np.log(2.0))
    assert loss_derivative(LossKind.LOGISTIC, 0.0) == pytest.approx(-0.5)


def test_logistic_does_not_overflow():
    assert loss_value(LossKind.LOGISTIC, -1000.0) == pytest.approx(1000.0)
    assert loss_derivative(LossKind.LOGISTIC, 1000.0) == pytest.approx(0.0, abs=1e-300)


def test_correlation_loss_is_linear():
    u = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_allclose(loss_value(LossKind.CORRELATION, u), -u)
    np.testing.assert_allclose(loss_derivative(LossKind.CORRELATION, u), -np.ones(3))
    assert not LossKind.CORRELATION.bounded_below
    assert LossKind.LOGISTIC.bounded_below


@given(st.sampled_from([LossKind.LOGISTIC, LossKind.EXPONENTIAL]), st.floats(-20.0, 20.0))
def test_derivative_matches_finite_difference(kind, u):
    h = 1e-6
    numeric = (loss_value(kind, u + h) - loss_value(kind, u - h)) / (2 * h)
    assert loss_derivative(kind, u) == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_constants():
    assert loss_constants(LossKind.LOGISTIC, 3.0) == (0.25, 1.0)
    assert loss_constants(LossKind.EXPONENTIAL, 2.0).m0 == pytest.approx(np.exp(2.0))
    assert loss_constants(LossKind.CORRELATION, 5.0) == (0.0, 1.0)
