import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from attn_margin.datasets import builtin_dataset, generate_assumption_b_dataset
from attn_margin.errors import AmbiguousProfileError, InvalidInputError, SolverStatusError
from attn_margin.geometry import (
    assumption_b_check,
    cone_membership,
    cone_parameters,
    directional_margin_profile,
    general_position_report,
    global_descent_check,
    gradient_correlation_ratio,
    label_margin_probe,
    lmm_enumeration,
    local_gradient_bounds,
    local_optimality_check,
    local_step_size,
    optimal_tokens,
    sample_cone,
    saturation_metrics,
    score_gap,
    selected_tokens,
    svm_neighbors,
)
from attn_margin.losses import LossKind
from attn_margin.model import grad_p, token_scores
from attn_margin.schemas import AttentionParams, ConeParameters, ConeSpec, ScoreTable, TokenDataset, TokenSelection
from attn_margin.svm import att_svm


def test_optimal_tokens_with_ties():
    selection = optimal_tokens(ScoreTable.from_rows([[0.1, 0.5, 0.5], [2.0]]))
    assert selection.indices == (1, 0)
    assert selection.tie_sets == ((1, 2), (0,))
    assert not selection.unique


def test_selected_tokens_follow_direction(fig1_local):
    assert selected_tokens(fig1_local.dataset, np.array([1.0, 0.0, 0.0])).indices == (0,)
    assert selected_tokens(fig1_local.dataset, np.array([-1.0, 0.5, 0.0])).indices == (2,)


def test_directional_profile():
    keys = [np.array([[2.0, 0.0], [0.0, 0.0], [-2.0, 0.0]])]
    profile = directional_margin_profile(keys, np.array([1.0, 0.0]), ScoreTable.from_rows([[1.0, 0.0, -1.0]]))
    assert profile.selection.indices == (0,)
    assert profile.gamma == pytest.approx(2.0)
    assert profile.minimal_set == [(0, 1)]
    assert profile.delta == pytest.approx(2.0)
    assert profile.neighbor_optimal is True


def test_directional_profile_single_tokens_and_ties():
    profile = directional_margin_profile([np.array([[1.0, 0.0]])], np.array([1.0, 0.0]))
    assert math.isinf(profile.gamma) and math.isinf(profile.delta)
    with pytest.raises(AmbiguousProfileError):
        directional_margin_profile([np.array([[0.0, 1.0], [0.0, -1.0]])], np.array([1.0, 0.0]))


def test_fig1_local_neighbors_and_optimality(fig1_local):
    dataset, v = fig1_local.dataset, fig1_local.v
    scores = token_scores(dataset, v)
    lmm = TokenSelection((0,))
    svm = att_svm(dataset, lmm)
    neighbors = svm_neighbors(dataset, svm, lmm)
    assert neighbors == [(1,)]
    assert local_optimality_check(scores, neighbors, lmm).overall
    assert score_gap(dataset, v, lmm, neighbors) == pytest.approx(0.8)


def test_lmm_enumeration_finds_both_directions(fig1_local):
    candidates = lmm_enumeration(fig1_local.dataset, fig1_local.v)
    local = {c.selection.indices: c for c in candidates if c.locally_optimal}
    assert set(local) == {(0,), (2,)}
    assert local[(2,)].globally_optimal and not local[(0,)].globally_optimal


def test_cone_parameters_example():
    keys = [np.array([[2.0, 0.0], [0.0, 0.0], [-2.0, 0.0]])]
    selection = TokenSelection((0,))
    params = cone_parameters(keys, att_svm(keys, selection), selection)
    assert params.delta == pytest.approx(0.5)
    assert params.a == pytest.approx(1.0)
    assert params.mu == pytest.approx(0.125 * 0.25)

    scaled = [2.0 * k for k in keys]
    assert cone_parameters(scaled, att_svm(scaled, selection), selection).mu == pytest.approx(params.mu)


def test_cone_parameters_sentinel_and_status():
    keys = [np.array([[1.0, 0.0], [0.0, 0.0]])]
    params = cone_parameters(keys, att_svm(keys, TokenSelection((0,))), TokenSelection((0,)))
    assert params.delta_is_sentinel and math.isinf(params.delta)
    infeasible = [np.array([[1.0, 0.0], [1.0, 0.0]])]
    with pytest.raises(SolverStatusError):
        cone_parameters(infeasible, att_svm(infeasible, TokenSelection((0,))), TokenSelection((0,)))


def test_cone_membership_and_sampling(rng):
    cone = ConeSpec(q=np.array([1.0, 0.0]), mu=0.1, r0=1.0)
    assert cone_membership(np.array([2.0, 0.1]), cone)
    assert not cone_membership(np.array([0.5, 0.0]), cone)
    assert not cone_membership(np.array([0.0, 2.0]), cone)
    assert not cone_membership(np.zeros(2), cone)
    for point in sample_cone(cone, 2.0, 20, rng):
        assert cone_membership(point, cone)


def test_local_step_size():
    params = ConeParameters(theta=1.0, delta=0.5, a=1.0, mu=0.01)
    eta, mu_binds = local_step_size(10.0, params)
    assert mu_binds and eta == pytest.approx(0.01 / 0.99)
    eta, mu_binds = local_step_size(1000.0, params)
    assert not mu_binds and eta == pytest.approx(1e-3)


def test_saturation_metrics(fig1_global):
    uniform = saturation_metrics(fig1_global.dataset, np.zeros(3))
    assert uniform.avg_max_prob == pytest.approx(1.0 / 3.0)
    assert uniform.avg_sparsity == pytest.approx(3.0)
    peaked = saturation_metrics(fig1_global.dataset, np.array([0.0, 100.0, 0.0]))
    assert peaked.avg_max_prob == pytest.approx(1.0)
    assert peaked.avg_sparsity == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(5))
def test_global_descent_sign_on_assumption_b(seed):
    dataset, v = generate_assumption_b_dataset(3, 4, 3, seed)
    assert assumption_b_check(dataset, v)
    gmm = att_svm(dataset, optimal_tokens(token_scores(dataset, v))).solution
    rng = np.random.default_rng(seed)
    for _ in range(50):
        p = rng.normal(size=3)
        p *= 10.0 * rng.uniform() / np.linalg.norm(p)
        assert global_descent_check(dataset, v, LossKind.LOGISTIC, p, gmm) < 0.0


def test_assumption_b_check_rejects_spread_scores(fig1_local):
    assert not assumption_b_check(fig1_local.dataset, fig1_local.v)


def test_gradient_correlation_ratio_on_target_is_one(fig1_global):
    target = fig1_global.target("gmm")
    ratio = gradient_correlation_ratio(fig1_global.dataset, fig1_global.v, LossKind.LOGISTIC, 3.0 * target, target)
    assert ratio == pytest.approx(1.0)


def _two_input_assumption_b():
    # keys in the first two coordinates, the score in the last; p^mm = (1, 1, 0)
    tokens = [
        np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]),
        np.array([[0.0, 0.0, 1.0], [-2.0, -1.0, 0.0], [0.5, -2.5, 0.0]]),
    ]
    dataset = TokenDataset.build(tokens, [1, 1], key_query=np.diag([1.0, 1.0, 0.0]))
    return dataset, np.array([0.0, 0.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([LossKind.LOGISTIC, LossKind.EXPONENTIAL]))
def test_cone_directions_correlate_no_better_than_max_margin(seed, kind):
    dataset, v = _two_input_assumption_b()
    assert assumption_b_check(dataset, v)
    svm = att_svm(dataset, TokenSelection((0, 0)))
    np.testing.assert_allclose(svm.solution, [1.0, 1.0, 0.0], atol=1e-9)
    cone = ConeSpec(q=svm.solution, mu=0.015, r0=49.0)
    point = sample_cone(cone, 50.0, 1, np.random.default_rng(seed))[0]
    p = 50.0 * point / np.linalg.norm(point)
    assert cone_membership(p, cone)
    gradient = grad_p(dataset, AttentionParams(p=p, v=v), kind)
    along_p = gradient @ (p / np.linalg.norm(p))
    along_mm = gradient @ (svm.solution / svm.objective_norm)
    assert along_mm < 0.0
    assert along_p >= 1.05 * along_mm
    assert gradient_correlation_ratio(dataset, v, kind, p, svm.solution) <= 1.05


def test_local_gradient_bounds_positive_inside_lmm_cone(fig1_local):
    dataset, v = fig1_local.dataset, fig1_local.v
    selection = TokenSelection((0,))
    svm = att_svm(dataset, selection)
    cone = ConeSpec(q=svm.solution, mu=0.02, r0=3.0)
    bounds = local_gradient_bounds(dataset, v, LossKind.LOGISTIC, svm, selection, cone, samples=30)
    assert bounds.all_positive
    assert 0.0 < bounds.lower <= bounds.upper


def test_general_position_report():
    report = general_position_report([np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])], TokenSelection((2,)))
    assert report.ranks == [2] and report.full_rank


def test_label_margin_probe_approaches_selected_margin():
    dataset = builtin_dataset("fig2_support").dataset
    selection = TokenSelection((0, 0, 0))
    margins = label_margin_probe(dataset, np.array([0.0, 2.0]), selection, np.array([0.0, 30.0]))
    assert margins.label_margin == pytest.approx(1.0)
    assert margins.feature_margin == pytest.approx(1.0, rel=1e-6)
    assert margins.target_margin == pytest.approx(1.0, rel=1e-6)
    assert margins.max_tail < 1e-10


def test_target_margin_follows_head_direction():
    dataset = builtin_dataset("fig2_support").dataset
    selection = TokenSelection((0, 0, 0))
    p = np.array([0.0, 30.0])
    # along (1, 0) the first input sits on the wrong side
    sideways = label_margin_probe(dataset, np.array([1.0, 0.0]), selection, p)
    assert sideways.target_margin == pytest.approx(-1.0, rel=1e-6)
    # uniform attention halves every feature
    flat = label_margin_probe(dataset, np.array([0.0, 1.0]), selection, np.zeros(2))
    assert flat.target_margin == pytest.approx(0.5)
    with pytest.raises(InvalidInputError):
        label_margin_probe(dataset, np.zeros(2), selection, p)
