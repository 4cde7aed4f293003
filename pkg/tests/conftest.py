import hypothesis
import numpy as np
import pytest

from attn_margin.datasets import builtin_dataset

np.seterr(all="warn")

hypothesis.settings.register_profile("ci", max_examples=30, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)
hypothesis.settings.load_profile("ci")


@pytest.fixture
def fig1_global():
    return builtin_dataset("fig1_global")


@pytest.fixture
def fig1_local():
    return builtin_dataset("fig1_local")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
