import numpy as np
import pytest

from attn_margin.datasets import builtin_dataset, generate_random_dataset
from attn_margin.errors import InvalidInputError
from attn_margin.linalg import correlation, unit
from attn_margin.losses import LossKind
from attn_margin.model import loss, smoothness_bound
from attn_margin.optimizers import (
    DESCENT_GUARANTEES_VOID,
    STEP_EXCEEDS_SMOOTHNESS,
    cone_restricted_path,
    gd,
    gd_on_W,
    joint_normalized_gd,
    joint_reg_path,
    minimize_over_ball,
    normalized_gd,
    project_cone_shell,
    projected_gd_ball,
    regularization_path,
)
from attn_margin.schemas import AttentionParams, ConeSpec, StopReason, TokenDataset, TokenSelection


def test_gd_records_initial_state_and_stops_on_zero_gradient():
    dataset = TokenDataset.build([np.array([[1.0, 2.0]])], [1])
    run = gd(dataset, np.array([1.0, 0.0]), LossKind.LOGISTIC, np.array([0.5, 0.5]), eta=0.1, max_steps=10)
    assert run.stop_reason is StopReason.GRAD_TOL
    assert run.executed_steps == 0
    np.testing.assert_array_equal(run.final_iterate, [0.5, 0.5])


def test_gd_budget_record_count(fig1_global):
    run = gd(fig1_global.dataset, fig1_global.v, LossKind.LOGISTIC, np.zeros(3), max_steps=25)
    assert run.stop_reason is StopReason.BUDGET
    assert len(run.steps) == 26
    assert run.step_size == pytest.approx(0.5 / smoothness_bound(fig1_global.dataset, fig1_global.v, LossKind.LOGISTIC))


def test_gd_flags():
    dataset, v = generate_random_dataset(2, 3, 2, 0)
    big = 10.0 / smoothness_bound(dataset, v, LossKind.LOGISTIC)
    assert STEP_EXCEEDS_SMOOTHNESS in gd(dataset, v, LossKind.LOGISTIC, np.zeros(2), eta=big, max_steps=2).flags
    assert DESCENT_GUARANTEES_VOID in gd(dataset, v, LossKind.CORRELATION, np.zeros(2), max_steps=2).flags


@pytest.mark.parametrize("seed", range(10))
def test_descent_lemma(seed):
    dataset, v = generate_random_dataset(3, 4, 3, seed)
    eta = 0.5 / smoothness_bound(dataset, v, LossKind.LOGISTIC)
    run = gd(dataset, v, LossKind.LOGISTIC, np.zeros(3), eta=eta, max_steps=500, grad_tol=0.0)
    for before, after in zip(run.steps, run.steps[1:]):
        assert after.loss - before.loss <= -0.5 * eta * before.grad_norm**2 + 1e-12


def test_normalized_steps_have_length_eta():
    instance = builtin_dataset("fig1_multi")
    run = normalized_gd(instance.dataset, instance.v, LossKind.LOGISTIC, np.zeros(3), 0.1, max_steps=50, keep_iterates=True)
    steps = np.diff(np.array(run.iterates), axis=0)
    np.testing.assert_allclose(np.linalg.norm(steps, axis=1), 0.1, rtol=1e-12)


def test_normalized_gd_converges_to_gmm_direction(fig1_global):
    target = fig1_global.target("gmm")
    run = normalized_gd(fig1_global.dataset, fig1_global.v, LossKind.LOGISTIC, np.zeros(3), 0.1, max_steps=1000, target=target)
    assert run.steps[-1].correlation >= 0.99
    assert run.steps[-1].iterate_norm > 10.0


def test_step_size_must_be_positive(fig1_global):
    with pytest.raises(InvalidInputError):
        normalized_gd(fig1_global.dataset, fig1_global.v, LossKind.LOGISTIC, np.zeros(3), 0.0)


def test_minimize_over_ball_interior_quadratic():
    center = np.array([0.3, -0.2])
    result = minimize_over_ball(lambda x: (float((x - center) @ (x - center)), 2.0 * (x - center)), np.zeros(2), 1.0)
    assert result.converged
    np.testing.assert_allclose(result.point, center, atol=1e-6)


def test_minimize_over_ball_boundary_quadratic():
    center = np.array([3.0, 4.0])
    result = minimize_over_ball(lambda x: (float((x - center) @ (x - center)), 2.0 * (x - center)), np.zeros(2), 1.0)
    np.testing.assert_allclose(result.point, [0.6, 0.8], atol=1e-6)


def test_projected_ball_matches_grid_search():
    keys = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    dataset = TokenDataset.build([keys], [1])
    v = np.array([1.0, 0.2])
    result = projected_gd_ball(dataset, v, LossKind.LOGISTIC, 1.0)
    assert np.linalg.norm(result.point) == pytest.approx(1.0, abs=1e-6)
    angles = np.linspace(0.0, 2 * np.pi, 20_001)
    grid = [loss(dataset, AttentionParams(p=np.array([np.cos(a), np.sin(a)]), v=v), LossKind.LOGISTIC) for a in angles]
    assert result.loss <= min(grid) + 1e-8


def test_projected_ball_rejects_nonpositive_radius(fig1_global):
    with pytest.raises(InvalidInputError):
        projected_gd_ball(fig1_global.dataset, fig1_global.v, LossKind.LOGISTIC, 0.0)


def test_regularization_path_is_monotone_and_aligns():
    dataset = TokenDataset.build([np.array([[0.0, 0.0], [1.0, 0.0], [-0.1, 1.0]])], [1])
    target = np.array([-0.1, 1.0]) / 1.01
    radii = [1.0, 2.0, 5.0, 10.0, 20.0]
    points = regularization_path(dataset, np.array([0.0, 1.0]), LossKind.LOGISTIC, radii, target, starts=4)
    for point, radius in zip(points, radii):
        assert np.linalg.norm(point.minimizer) <= radius * (1 + 1e-8)
    losses = [p.loss for p in points]
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
    assert points[-1].correlation >= 0.98


def test_regularization_path_self_target(fig1_global):
    first = regularization_path(fig1_global.dataset, fig1_global.v, LossKind.LOGISTIC, [2.0], np.ones(3), starts=2)[0]
    again = regularization_path(fig1_global.dataset, fig1_global.v, LossKind.LOGISTIC, [2.0], first.minimizer, starts=2)
    assert again[0].correlation == pytest.approx(1.0)


def test_schedule_validation(fig1_global):
    with pytest.raises(InvalidInputError):
        regularization_path(fig1_global.dataset, fig1_global.v, LossKind.LOGISTIC, [2.0, 1.0], np.ones(3))


def test_cone_shell_projection_is_feasible(rng):
    cone = ConeSpec(q=np.array([1.0, 1.0, 0.0]), mu=0.1, r0=1.0)
    for _ in range(50):
        y = project_cone_shell(5.0 * rng.normal(size=3), cone, 3.0)
        norm = np.linalg.norm(y)
        assert 1.0 - 1e-8 <= norm <= 3.0 + 1e-8
        assert correlation(y, cone.q) >= 0.9 - 1e-8


def test_cone_path_below_floor_is_rejected(fig1_local):
    cone = ConeSpec(q=np.array([1.0, 0.0, 0.0]), mu=0.1, r0=5.0)
    with pytest.raises(InvalidInputError):
        cone_restricted_path(fig1_local.dataset, fig1_local.v, LossKind.LOGISTIC, cone, [2.0])


def test_cone_path_around_lmm_converges(fig1_local):
    lmm = fig1_local.target("lmm")
    report = cone_restricted_path(
        fig1_local.dataset, fig1_local.v, LossKind.LOGISTIC, ConeSpec(q=lmm, mu=0.1, r0=1.0), [2.0, 4.0, 8.0, 16.0], starts=1
    )
    assert report.points[-1].correlation >= 0.99
    assert not report.norm_stalled


def test_cone_path_between_lmm_and_gmm_fails(fig1_local):
    q = unit(unit(fig1_local.target("lmm")) + unit(fig1_local.target("gmm")))
    report = cone_restricted_path(
        fig1_local.dataset, fig1_local.v, LossKind.LOGISTIC, ConeSpec(q=q, mu=0.1, r0=1.0), [2.0, 4.0, 8.0, 16.0], starts=1
    )
    assert report.norm_stalled or report.deviation >= 0.01


def test_joint_path_single_token_keeps_p():
    dataset = TokenDataset.build([np.array([[1.0, 2.0]])], [-1])
    points = joint_reg_path(dataset, [(1.0, 1.0), (2.0, 2.0)], v_target=np.array([-1.0, -2.0]), p0=np.array([0.3, 0.0]))
    np.testing.assert_array_equal(points[-1].p, [0.3, 0.0])
    assert points[-1].v_correlation == pytest.approx(1.0, abs=1e-6)


def test_joint_path_schedule_must_increase():
    dataset, _ = generate_random_dataset(2, 2, 2, 0)
    with pytest.raises(InvalidInputError):
        joint_reg_path(dataset, [(1.0, 2.0), (2.0, 2.0)])


@pytest.mark.slow
def test_joint_path_support_instance():
    instance = builtin_dataset("fig2_support")
    points = joint_reg_path(
        instance.dataset,
        [(1.0, 1.0), (2.0, 2.0), (4.0, 4.0), (8.0, 8.0), (16.0, 16.0)],
        v_target=np.array([0.0, 1.0]),
        p_target=np.array([0.0, 1.0]),
    )
    assert points[-1].v_correlation >= 0.98
    assert points[-1].p_correlation >= 0.98


def test_joint_normalized_gd_raises_probabilities():
    instance = builtin_dataset("fig2_support")
    run = joint_normalized_gd(
        instance.dataset, LossKind.LOGISTIC, np.zeros(2), np.zeros(2), 0.1, max_steps=300, selection=TokenSelection((0, 0, 0))
    )
    assert run.steps[-1].selected_prob > run.steps[0].selected_prob
    assert run.steps[-1].label_prob > 0.9


@pytest.mark.parametrize("seed", range(5))
def test_gd_on_w_tracks_p(seed):
    dataset, v = generate_random_dataset(3, 4, 4, seed)
    rng = np.random.default_rng(seed)
    report = gd_on_W(dataset, v, LossKind.LOGISTIC, rng.normal(size=4), 0.1 * rng.normal(size=4), 0.1, 100)
    assert report.max_deviation <= 1e-8
    assert len(report.w_iterates) == 101


def test_gd_on_w_first_step_rank_one_and_scale_invariant():
    dataset, v = generate_random_dataset(2, 3, 3, 4)
    u = np.array([1.0, -2.0, 0.5])
    first = gd_on_W(dataset, v, LossKind.LOGISTIC, u, np.zeros(3), 0.2, 1)
    assert np.linalg.matrix_rank(first.w_iterates[1], tol=1e-12) <= 1
    scaled = gd_on_W(dataset, v, LossKind.LOGISTIC, 3.0 * u, np.zeros(3), 0.2, 20)
    base = gd_on_W(dataset, v, LossKind.LOGISTIC, u, np.zeros(3), 0.2, 20)
    for a, b in zip(base.p_iterates, scaled.p_iterates):
        np.testing.assert_allclose(a, b)
    with pytest.raises(InvalidInputError):
        gd_on_W(dataset, v, LossKind.LOGISTIC, np.zeros(3), np.zeros(3), 0.2, 1)
