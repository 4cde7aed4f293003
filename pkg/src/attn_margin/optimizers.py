"""
Optimizers for the attention parameter p (and, jointly, the head v)
===================================================================

Plain and normalized gradient descent record a :class:`Trajectory` per run.
Everything constrained (balls, the local cone, the joint (v, p) path) goes
through :func:`minimize_over_ball`, a projected descent kernel with normalized
steps. Raw gradients shrink like exp(-R * margin) along the path, so a fixed
step in gradient units would stall long before the constraint is reached.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, InvariantViolationError
from .geometry import saturation_from_probs, sample_cone
from .linalg import correlation, unit
from .losses import LossKind
from .model import forward, grad_W, loss_and_grad_p, smoothness_bound
from .schemas import (
    AttentionParams,
    BallSolution,
    ConePathReport,
    ConeSpec,
    JointPathPoint,
    JointStepRecord,
    JointTrajectory,
    PathPoint,
    StepRecord,
    StopReason,
    TokenDataset,
    TokenSelection,
    Trajectory,
    WMappingReport,
    as_vector,
)

LOGGER = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]
Projection = Callable[[np.ndarray], np.ndarray]

DEFAULT_MAX_STEPS = 100_000
DEFAULT_GRAD_TOL = 1e-10
DEFAULT_STEP_FRACTION = 0.5

BALL_STEP = 0.25
BALL_MAX_STEPS = 20_000
BALL_TOL = 1e-8
DEFAULT_STARTS = 8

CONE_PROJECTION_ROUNDS = 200
FEASIBILITY_TOL = 1e-8
STALL_FRACTION = 0.99

JOINT_MAX_ROUNDS = 20
JOINT_TOL = 1e-6

STEP_EXCEEDS_SMOOTHNESS = "step_exceeds_smoothness"
DESCENT_GUARANTEES_VOID = "descent_guarantees_void"
BUDGET_FLAG = "budget"


def _record(step: int, p: np.ndarray, loss: float, grad: np.ndarray, probs: np.ndarray, target) -> StepRecord:
    metrics = saturation_from_probs(probs)
    return StepRecord(
        step=step,
        iterate_norm=float(np.linalg.norm(p)),
        loss=float(loss),
        grad_norm=float(np.linalg.norm(grad)),
        correlation=None if target is None else correlation(p, target),
        max_prob=metrics.avg_max_prob,
        sparsity=metrics.avg_sparsity,
    )


def _descend(
    dataset: TokenDataset,
    v: np.ndarray,
    kind: LossKind,
    p0: np.ndarray,
    eta: float,
    max_steps: int,
    grad_tol: float,
    normalized: bool,
    target: Optional[np.ndarray],
    keep_iterates: bool,
) -> Tuple[List[StepRecord], np.ndarray, StopReason, Optional[List[np.ndarray]]]:
    if eta <= 0.0:
        raise InvalidInputError(f"step size must be positive, got {eta}")
    if max_steps < 0:
        raise InvalidInputError("max_steps must be nonnegative")
    p = as_vector(p0, dataset.d, "p0").copy()
    v = as_vector(v, dataset.d, "v")
    target = None if target is None else as_vector(target, dataset.d, "target")

    records: List[StepRecord] = []
    iterates: Optional[List[np.ndarray]] = [] if keep_iterates else None
    reason = StopReason.BUDGET
    for step in range(max_steps + 1):
        value, grad, state = loss_and_grad_p(dataset, p, v, kind)
        records.append(_record(step, p, value, grad, state.probs, target))
        if iterates is not None:
            iterates.append(p.copy())
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            reason = StopReason.DIVERGED
            LOGGER.warning("non-finite loss at step %d, stopping", step)
            break
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= grad_tol:
            reason = StopReason.GRAD_TOL
            break
        if step == max_steps:
            break
        p = p - (eta / grad_norm if normalized else eta) * grad
    return records, p, reason, iterates


def gd(
    dataset: TokenDataset,
    v: np.ndarray,
    kind: LossKind,
    p0: np.ndarray,
    eta: Optional[float] = None,
    max_steps: int = DEFAULT_MAX_STEPS,
    grad_tol: float = DEFAULT_GRAD_TOL,
    target: Optional[np.ndarray] = None,
    keep_iterates: bool = False,
) -> Trajectory:
    """Vanilla gradient descent p <- p - eta grad L(p).

    ``eta`` defaults to half the certified step 1/L_p. Larger steps run but are
    flagged, as are losses without a lower bound.
    """
    limit = smoothness_bound(dataset, v, kind)
    if eta is None:
        eta = DEFAULT_STEP_FRACTION / limit if limit > 0.0 else 1.0
    flags: List[str] = []
    if limit > 0.0 and eta > 1.0 / limit:
        flags.append(STEP_EXCEEDS_SMOOTHNESS)
    if not kind.bounded_below:
        flags.append(DESCENT_GUARANTEES_VOID)

    records, p, reason, iterates = _descend(
        dataset, v, kind, p0, eta, max_steps, grad_tol, False, target, keep_iterates
    )
    LOGGER.info("gd: %d steps, stop=%s, final loss %.6g", len(records) - 1, reason.value, records[-1].loss)
    return Trajectory(steps=records, final_iterate=p, step_size=eta, stop_reason=reason, flags=flags, iterates=iterates)


def normalized_gd(
    dataset: TokenDataset,
    v: np.ndarray,
    kind: LossKind,
    p0: np.ndarray,
    eta: float,
    max_steps: int = DEFAULT_MAX_STEPS,
    target: Optional[np.ndarray] = None,
    keep_iterates: bool = False,
) -> Trajectory:
    """Gradient descent with unit-norm directions: every step moves p by exactly eta."""
    records, p, reason, iterates = _descend(
        dataset, v, kind, p0, eta, max_steps, 0.0, True, target, keep_iterates
    )
    flags = [] if kind.bounded_below else [DESCENT_GUARANTEES_VOID]
    LOGGER.info("normalized gd: %d steps, stop=%s", len(records) - 1, reason.value)
    return Trajectory(steps=records, final_iterate=p, step_size=eta, stop_reason=reason, flags=flags, iterates=iterates)


def project_ball(x: np.ndarray, radius: float) -> np.ndarray:
    norm = float(np.linalg.norm(x))
    if norm <= radius:
        return x
    return x * (radius / norm)


def minimize_over_ball(
    objective: Objective,
    x0: np.ndarray,
    radius: float,
    project: Optional[Projection] = None,
    step: float = BALL_STEP,
    max_steps: int = BALL_MAX_STEPS,
    tol: float = BALL_TOL,
) -> BallSolution:
    """Projected descent with normalized steps over a set inside the ``radius`` ball.

    The step length starts at ``step * max(radius, 1)`` and halves whenever two
    consecutive moves point against each other. The run converges once a move
    or the step length drops below ``tol * max(radius, 1)``. The best iterate
    seen is returned; ties go to the later one.
    """
    if radius <= 0.0:
        raise InvalidInputError(f"radius must be positive, got {radius}")
    if step <= 0.0:
        raise InvalidInputError("step must be positive")
    if project is None:
        project = lambda x: project_ball(x, radius)  # noqa: E731

    scale = max(radius, 1.0)
    floor = tol * scale
    length = step * scale
    x = project(np.asarray(x0, dtype=float).copy())
    value, gradient = objective(x)
    best_x, best_value = x, value
    previous: Optional[np.ndarray] = None
    converged = False
    flags: List[str] = []
    taken = 0

    for taken in range(1, max_steps + 1):
        grad_norm = float(np.linalg.norm(gradient))
        if grad_norm == 0.0:
            converged = True
            break
        candidate = project(x - (length / grad_norm) * gradient)
        move = candidate - x
        if float(np.linalg.norm(move)) <= floor:
            converged = True
            break
        if previous is not None and float(move @ previous) < 0.0:
            length *= 0.5
        x, previous = candidate, move
        value, gradient = objective(x)
        if not (math.isfinite(value) and np.all(np.isfinite(gradient))):
            flags.append(StopReason.DIVERGED.value)
            break
        if value <= best_value:
            best_x, best_value = x, value
        if length <= floor:
            converged = True
            break

    if not converged and not flags:
        flags.append(BUDGET_FLAG)
    return BallSolution(point=best_x, loss=float(best_value), converged=converged, steps=taken, flags=flags)


def _p_objective(dataset: TokenDataset, v: np.ndarray, kind: LossKind) -> Objective:
    def objective(p: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad, _ = loss_and_grad_p(dataset, p, v, kind)
        return value, grad

    return objective


def _ball_starts(d: int, radius: float, p0: Optional[np.ndarray], starts: int, seed: int) -> List[np.ndarray]:
    points: List[np.ndarray] = [] if p0 is None else [np.asarray(p0, dtype=float)]
    k = 0
    while len(points) < starts:
        rng = np.random.default_rng([seed, k])
        direction = unit(rng.normal(size=d))
        points.append(direction * radius * rng.uniform() ** (1.0 / d))
        k += 1
    return points


def projected_gd_ball(
    dataset: TokenDataset,
    v: np.ndarray,
    kind: LossKind,
    radius: float,
    p0: Optional[np.ndarray] = None,
    eta: float = BALL_STEP,
    max_steps: int = BALL_MAX_STEPS,
    tol: float = BALL_TOL,
    starts: int = DEFAULT_STARTS,
    seed: int = 0,
) -> BallSolution:
    """Approximate argmin of L(p) over ||p|| <= radius.

    ``p0`` is the first start; the rest are drawn uniformly from the ball with
    ``default_rng([seed, k])``. The lowest-loss result wins.
    """
    if radius <= 0.0:
        raise InvalidInputError(f"radius must be positive, got {radius}")
    if starts < 1:
        raise InvalidInputError("need at least one start")
    v = as_vector(v, dataset.d, "v")
    if p0 is not None:
        p0 = as_vector(p0, dataset.d, "p0")
    objective = _p_objective(dataset, v, kind)

    best: Optional[BallSolution] = None
    for x0 in _ball_starts(dataset.d, radius, p0, starts, seed):
        found = minimize_over_ball(objective, x0, radius, step=eta, max_steps=max_steps, tol=tol)
        if best is None or found.loss < best.loss:
            best = found
    assert best is not None
    if not best.converged:
        LOGGER.warning("ball solve at R=%.4g stopped on budget (loss %.6g)", radius, best.loss)
    return best


def _check_schedule(radii: Sequence[float]) -> List[float]:
    radii = [float(r) for r in radii]
    if not radii:
        raise InvalidInputError("radius schedule is empty")
    if radii[0] <= 0.0 or any(b <= a for a, b in zip(radii, radii[1:])):
        raise InvalidInputError("radius schedule must be positive and strictly increasing")
    return radii


def regularization_path(
    dataset: TokenDataset,
    v: np.ndarray,
    kind: LossKind,
    radii: Sequence[float],
    target: np.ndarray,
    starts: int = DEFAULT_STARTS,
    seed: int = 0,
    max_steps: int = BALL_MAX_STEPS,
    tol: float = BALL_TOL,
) -> List[PathPoint]:
    radii = _check_schedule(radii)
    target = as_vector(target, dataset.d, "target")
    points: List[PathPoint] = []
    warm: Optional[np.ndarray] = None
    for radius in radii:
        found = projected_gd_ball(
            dataset, v, kind, radius, p0=warm, max_steps=max_steps, tol=tol, starts=starts, seed=seed
        )
        warm = found.point
        points.append(
            PathPoint(
                radius=radius,
                minimizer=found.point,
                loss=found.loss,
                correlation=correlation(found.point, target),
                converged=found.converged,
            )
        )
        LOGGER.debug("path R=%.4g corr=%.6f loss=%.6g", radius, points[-1].correlation, found.loss)
    return points


def _project_correlation_cone(x: np.ndarray, axis: np.ndarray, mu: float) -> np.ndarray:
    """Exact projection onto {y : <y, axis> >= (1 - mu) ||y||} for a unit axis."""
    cos_t = 1.0 - mu
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t**2))
    along = float(x @ axis)
    if along >= cos_t * float(np.linalg.norm(x)):
        return x
    across = x - along * axis
    across_norm = float(np.linalg.norm(across))
    if across_norm == 0.0:
        return np.zeros_like(x)
    edge = cos_t * axis + sin_t * across / across_norm
    return max(float(x @ edge), 0.0) * edge


def project_cone_shell(x: np.ndarray, cone: ConeSpec, radius: float) -> np.ndarray:
    """Alternating projection onto cone(q, mu) and the shell r0 <= ||p|| <= radius.

    Radial rescaling keeps correlations, so the loop settles within a few
    rounds; it is capped at ``CONE_PROJECTION_ROUNDS``.
    """
    axis = unit(cone.q)
    y = np.asarray(x, dtype=float)
    for _ in range(CONE_PROJECTION_ROUNDS):
        y = _project_correlation_cone(y, axis, cone.mu)
        norm = float(np.linalg.norm(y))
        if norm == 0.0:
            y = axis * cone.r0
        elif norm > radius:
            y = y * (radius / norm)
        elif norm < cone.r0:
            y = y * (cone.r0 / norm)
        if _in_cone_shell(y, axis, cone, radius):
            break
    return y


def _in_cone_shell(y: np.ndarray, axis: np.ndarray, cone: ConeSpec, radius: float) -> bool:
    norm = float(np.linalg.norm(y))
    if norm > radius * (1.0 + FEASIBILITY_TOL) or norm < cone.r0 * (1.0 - FEASIBILITY_TOL):
        return False
    return norm == 0.0 or float(y @ axis) >= (1.0 - cone.mu) * norm - FEASIBILITY_TOL * max(norm, 1.0)


def cone_restricted_path(
    dataset: TokenDataset,
    v: np.ndarray,
    kind: LossKind,
    cone: ConeSpec,
    radii: Sequence[float],
    starts: int = 4,
    seed: int = 0,
    max_steps: int = BALL_MAX_STEPS,
    tol: float = BALL_TOL,
) -> ConePathReport:
    """Minimizers over {||p|| <= R} restricted to the cone around q with ||p|| >= r0.

    A direction q outside the locally optimal set either stops the norm growing
    or drags the minimizer's direction away from q; both are reported.
    """
    radii = _check_schedule(radii)
    if radii[0] < cone.r0:
        raise InvalidInputError(f"radius {radii[0]} is below the cone floor r0={cone.r0}: empty feasible set")
    if cone.q.shape[0] != dataset.d:
        raise InvalidInputError(f"cone direction has dimension {cone.q.shape[0]}, expected {dataset.d}")
    v = as_vector(v, dataset.d, "v")
    axis = unit(cone.q)
    objective = _p_objective(dataset, v, kind)
    rng = np.random.default_rng(seed)

    points: List[PathPoint] = []
    warm = axis * max(cone.r0, radii[0])
    for radius in radii:
        project = lambda x, radius=radius: project_cone_shell(x, cone, radius)  # noqa: E731
        candidates = [warm] + sample_cone(cone, max(cone.r0, radius / 2.0), max(starts - 1, 0), rng)
        best: Optional[BallSolution] = None
        for x0 in candidates:
            found = minimize_over_ball(objective, x0, radius, project=project, max_steps=max_steps, tol=tol)
            if best is None or found.loss < best.loss:
                best = found
        assert best is not None
        if not _in_cone_shell(best.point, axis, cone, radius):
            raise InvariantViolationError(f"cone-restricted minimizer at R={radius} left the feasible set")
        warm = best.point
        points.append(
            PathPoint(
                radius=radius,
                minimizer=best.point,
                loss=best.loss,
                correlation=correlation(best.point, axis),
                converged=best.converged,
            )
        )

    final = points[-1]
    stalled = float(np.linalg.norm(final.minimizer)) < STALL_FRACTION * final.radius
    deviation = 1.0 - final.correlation
    LOGGER.info("cone path: stalled=%s deviation=%.4g", stalled, deviation)
    return ConePathReport(points=points, norm_stalled=stalled, deviation=deviation)


def _v_objective(dataset: TokenDataset, p: np.ndarray, kind: LossKind) -> Objective:
    def objective(v: np.ndarray) -> Tuple[float, np.ndarray]:
        state = forward(dataset, AttentionParams(p=p, v=v), kind)
        features = np.einsum("it,itd->id", state.probs, dataset.stacked_tokens)
        grad = np.einsum("i,i,id->d", state.derivatives, dataset.labels, features) / dataset.n
        return state.loss, grad

    return objective


def joint_reg_path(
    dataset: TokenDataset,
    schedule: Sequence[Tuple[float, float]],
    kind: LossKind = LossKind.LOGISTIC,
    v_target: Optional[np.ndarray] = None,
    p_target: Optional[np.ndarray] = None,
    v0: Optional[np.ndarray] = None,
    p0: Optional[np.ndarray] = None,
    max_rounds: int = JOINT_MAX_ROUNDS,
    tol: float = JOINT_TOL,
    max_steps: int = BALL_MAX_STEPS,
) -> List[JointPathPoint]:
    """Block-coordinate minimization of L(v, p) over ||v|| <= r, ||p|| <= R.

    Each schedule point alternates a v-ball solve and a p-ball solve until the
    relative change of both blocks falls below ``tol``, warm-started from the
    previous point.
    """
    if not schedule:
        raise InvalidInputError("joint schedule is empty")
    pairs = [(float(r), float(R)) for r, R in schedule]
    for (r1, R1), (r2, R2) in zip(pairs, pairs[1:]):
        if r2 <= r1 or R2 <= R1:
            raise InvalidInputError("joint schedule must increase in both radii")
    if pairs[0][0] <= 0.0 or pairs[0][1] <= 0.0:
        raise InvalidInputError("joint schedule radii must be positive")
    if kind is not LossKind.LOGISTIC:
        LOGGER.warning("joint path is stated for the logistic loss, running with %s", kind.value)

    d = dataset.d
    v = np.zeros(d) if v0 is None else as_vector(v0, d, "v0")
    p = np.zeros(d) if p0 is None else as_vector(p0, d, "p0")
    v_target = None if v_target is None else as_vector(v_target, d, "v_target")
    p_target = None if p_target is None else as_vector(p_target, d, "p_target")

    points: List[JointPathPoint] = []
    for r, R in pairs:
        v, p = project_ball(v, r), project_ball(p, R)
        converged = False
        rounds = 0
        value = float("nan")
        for rounds in range(1, max_rounds + 1):
            v_found = minimize_over_ball(_v_objective(dataset, p, kind), v, r, max_steps=max_steps)
            p_found = minimize_over_ball(_p_objective(dataset, v_found.point, kind), p, R, max_steps=max_steps)
            change = float(np.linalg.norm(v_found.point - v)) / r + float(np.linalg.norm(p_found.point - p)) / R
            v, p, value = v_found.point, p_found.point, p_found.loss
            if change <= tol:
                converged = True
                break
        if not converged:
            LOGGER.warning("joint path at (r=%.4g, R=%.4g) hit the round cap", r, R)
        points.append(
            JointPathPoint(
                v_radius=r,
                p_radius=R,
                v=v,
                p=p,
                loss=value,
                v_correlation=float("nan") if v_target is None else correlation(v, v_target),
                p_correlation=float("nan") if p_target is None else correlation(p, p_target),
                rounds=rounds,
                converged=converged,
            )
        )
        LOGGER.debug("joint path (r=%.4g, R=%.4g): %d rounds, loss %.6g", r, R, rounds, value)
    return points


def joint_normalized_gd(
    dataset: TokenDataset,
    kind: LossKind,
    v0: np.ndarray,
    p0: np.ndarray,
    eta: float,
    max_steps: int = 1000,
    selection: Optional[TokenSelection] = None,
) -> JointTrajectory:
    """Normalized descent on the stacked parameter (v, p)."""
    if eta <= 0.0:
        raise InvalidInputError(f"step size must be positive, got {eta}")
    d = dataset.d
    v = as_vector(v0, d, "v0").copy()
    p = as_vector(p0, d, "p0").copy()
    if selection is not None:
        selection.validate_for(dataset.token_counts)
    rows = np.arange(dataset.n)

    records: List[JointStepRecord] = []
    reason = StopReason.BUDGET
    for step in range(max_steps + 1):
        state = forward(dataset, AttentionParams(p=p, v=v), kind)
        features = np.einsum("it,itd->id", state.probs, dataset.stacked_tokens)
        g_v = np.einsum("i,i,id->d", state.derivatives, dataset.labels, features) / dataset.n
        g_p = np.einsum("i,itd,it->d", state.derivatives, dataset.stacked_keys, state.weighted) / dataset.n
        records.append(
            JointStepRecord(
                step=step,
                v_norm=float(np.linalg.norm(v)),
                p_norm=float(np.linalg.norm(p)),
                loss=state.loss,
                max_prob=float(state.probs.max(axis=1).mean()),
                selected_prob=None
                if selection is None
                else float(state.probs[rows, list(selection.indices)].mean()),
                label_prob=float(np.mean(0.5 * (1.0 + np.tanh(state.margins / 2.0)))),
            )
        )
        if not math.isfinite(state.loss):
            reason = StopReason.DIVERGED
            break
        norm = math.sqrt(float(g_v @ g_v) + float(g_p @ g_p))
        if norm == 0.0:
            reason = StopReason.GRAD_TOL
            break
        if step == max_steps:
            break
        v = v - (eta / norm) * g_v
        p = p - (eta / norm) * g_p
    return JointTrajectory(steps=records, final_v=v, final_p=p, step_size=eta, stop_reason=reason)


def gd_on_W(
    dataset: TokenDataset,
    v: np.ndarray,
    kind: LossKind,
    u: np.ndarray,
    p0: np.ndarray,
    eta: float,
    max_steps: int,
) -> WMappingReport:
    """Run GD on W (query u) and on p side by side and track ||W(t) - u p(t)^T / ||u||^2||_F.

    Keys are the raw tokens on both sides.
    """
    d = dataset.d
    u = as_vector(u, d, "u")
    scale = float(u @ u)
    if scale == 0.0:
        raise InvalidInputError("query vector u must be nonzero")
    if eta <= 0.0:
        raise InvalidInputError(f"step size must be positive, got {eta}")
    v = as_vector(v, d, "v")
    base = dataset.with_key_query(np.eye(d))

    p = as_vector(p0, d, "p0").copy()
    W = np.outer(u, p) / scale
    p_iterates = [p.copy()]
    w_iterates = [W.copy()]
    worst = 0.0
    for _ in range(max_steps):
        _, grad, _ = loss_and_grad_p(base, p, v, kind)
        W = W - (eta / scale) * grad_W(base, AttentionParams(p=u, v=v, W=W), kind)
        p = p - eta * grad
        p_iterates.append(p.copy())
        w_iterates.append(W.copy())
        worst = max(worst, float(np.linalg.norm(W - np.outer(u, p) / scale)))
    LOGGER.info("W/p mapping over %d steps: max deviation %.3e", max_steps, worst)
    return WMappingReport(p_iterates=p_iterates, w_iterates=w_iterates, max_deviation=worst)
