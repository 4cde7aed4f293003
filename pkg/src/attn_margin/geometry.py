from __future__ import annotations

import itertools
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import AmbiguousProfileError, BudgetExceededError, DimensionMismatchError, InvalidInputError, SolverStatusError
from .linalg import correlation, unit
from .losses import LossKind
from .model import attention_features, batched_softmax, grad_p, loss_and_grad_p, token_scores
from .schemas import (
    AttentionParams,
    ConeParameters,
    ConeSpec,
    DirectionalProfile,
    GeneralPositionReport,
    LabelMarginProbe,
    LmmCandidate,
    LocalGradientBounds,
    LocalOptimality,
    SaturationMetrics,
    ScoreTable,
    SvmSolution,
    TokenDataset,
    TokenSelection,
    as_vector,
)
from .svm import ENUMERATION_BUDGET, active_tolerance, att_svm, key_matrices, label_svm

LOGGER = logging.getLogger(__name__)

CONE_BOUNDARY_TOL = 1e-12


def _argmax_with_ties(values: np.ndarray, tol: float) -> Tuple[int, ...]:
    top = values.max()
    return tuple(int(t) for t in np.flatnonzero(values >= top - tol))


def optimal_tokens(scores: ScoreTable) -> TokenSelection:
    """Highest-score tokens per input; the canonical pick is the smallest index of each tie set."""
    ties = []
    for row in scores.rows:
        tol = 1e-12 * (1.0 + float(np.max(np.abs(row))))
        ties.append(_argmax_with_ties(row, tol))
    return TokenSelection(tuple(t[0] for t in ties), tuple(ties))


def selected_tokens(keys: TokenDataset | Sequence[np.ndarray], q: np.ndarray) -> TokenSelection:
    mats = key_matrices(keys)
    q = as_vector(q, mats[0].shape[1], "q")
    q_norm = float(np.linalg.norm(q))
    if q_norm == 0.0:
        raise InvalidInputError("selected tokens need a nonzero direction")
    key_norm = max(float(np.max(np.linalg.norm(k, axis=1))) for k in mats)
    tol = 1e-10 * (1.0 + q_norm * key_norm)
    ties = [_argmax_with_ties(k @ q, tol) for k in mats]
    return TokenSelection(tuple(t[0] for t in ties), tuple(ties))


def _margins(mats: Sequence[np.ndarray], selection: TokenSelection, q: np.ndarray) -> List[Tuple[int, int, float]]:
    rows = []
    for i, (k, alpha) in enumerate(zip(mats, selection.indices)):
        for t in range(k.shape[0]):
            if t != alpha:
                rows.append((i, t, float((k[alpha] - k[t]) @ q)))
    return rows


def directional_margin_profile(
    keys: TokenDataset | Sequence[np.ndarray],
    q: np.ndarray,
    scores: Optional[ScoreTable] = None,
) -> DirectionalProfile:
    mats = key_matrices(keys)
    selection = selected_tokens(mats, q)
    if not selection.unique:
        raise AmbiguousProfileError(f"direction selects tied tokens: {selection.tie_sets}")
    q = np.asarray(q, dtype=float)
    margins = _margins(mats, selection, q)
    if not margins:
        return DirectionalProfile(selection=selection, gamma=math.inf, minimal_set=[], delta=math.inf)

    key_norm = max(float(np.max(np.linalg.norm(k, axis=1))) for k in mats)
    tol = 1e-10 * (1.0 + float(np.linalg.norm(q)) * key_norm)
    gamma = min(m for _, _, m in margins)
    minimal = [(i, t) for i, t, m in margins if m <= gamma + tol]
    larger = [m for _, _, m in margins if m > gamma + tol]
    delta = min(larger) - gamma if larger else math.inf

    neighbor_optimal = None
    if scores is not None:
        neighbor_optimal = all(
            scores[i][selection.indices[i]] > scores[i][t] for i, t in minimal
        )
    return DirectionalProfile(
        selection=selection,
        gamma=gamma,
        minimal_set=minimal,
        delta=delta,
        neighbor_optimal=neighbor_optimal,
    )


def _require_optimal(svm: SvmSolution) -> None:
    if not svm.is_optimal:
        raise SolverStatusError(f"an Optimal SVM solution is required, got {svm.status.value}")


def svm_neighbors(
    keys: TokenDataset | Sequence[np.ndarray],
    svm: SvmSolution,
    selection: TokenSelection,
) -> List[Tuple[int, ...]]:
    """Per input, the tokens whose separating constraint is tight at p^mm."""
    _require_optimal(svm)
    mats = key_matrices(keys)
    selection.validate_for([k.shape[0] for k in mats])
    tol = active_tolerance(svm.margin)
    neighbors = []
    for k, alpha in zip(mats, selection.indices):
        values = (k[alpha] - k) @ svm.solution
        neighbors.append(
            tuple(t for t in range(k.shape[0]) if t != alpha and abs(values[t] - 1.0) <= tol)
        )
    return neighbors


def local_optimality_check(
    scores: ScoreTable,
    neighbors: Sequence[Sequence[int]],
    selection: TokenSelection,
) -> LocalOptimality:
    if len(neighbors) != scores.n or len(selection.indices) != scores.n:
        raise DimensionMismatchError("scores, neighbors and selection must cover the same inputs")
    per_input = []
    for row, members, alpha in zip(scores.rows, neighbors, selection.indices):
        per_input.append(all(row[alpha] > row[t] for t in members))
    return LocalOptimality(per_input=per_input, overall=all(per_input))


def lmm_enumeration(
    dataset: TokenDataset,
    v: np.ndarray,
    budget: int = ENUMERATION_BUDGET,
) -> List[LmmCandidate]:
    """All feasible selections with their max-margin directions and optimality flags."""
    total = math.prod(dataset.token_counts)
    if total > budget:
        raise BudgetExceededError(f"{total} selections exceed the enumeration budget of {budget}")
    scores = token_scores(dataset, v)
    best = optimal_tokens(scores)

    candidates = []
    for indices in itertools.product(*(range(t) for t in dataset.token_counts)):
        selection = TokenSelection(indices)
        solution = att_svm(dataset, selection)
        if not solution.is_optimal:
            continue
        neighbors = svm_neighbors(dataset, solution, selection)
        local = local_optimality_check(scores, neighbors, selection).overall
        is_global = all(alpha in ties for alpha, ties in zip(indices, best.tie_sets or ()))
        candidates.append(
            LmmCandidate(
                selection=selection,
                solution=solution,
                locally_optimal=local,
                globally_optimal=is_global,
            )
        )
    LOGGER.info(
        "enumerated %d selections: %d feasible, %d locally optimal",
        total,
        len(candidates),
        sum(c.locally_optimal for c in candidates),
    )
    return candidates


def cone_parameters(
    keys: TokenDataset | Sequence[np.ndarray],
    svm: SvmSolution,
    selection: TokenSelection,
    scores: Optional[ScoreTable] = None,
) -> ConeParameters:
    _require_optimal(svm)
    mats = key_matrices(keys)
    p_mm = svm.solution
    norm = float(np.linalg.norm(p_mm))
    if norm == 0.0:
        raise SolverStatusError("cone parameters need a nonzero max-margin direction")
    neighbors = svm_neighbors(mats, svm, selection)

    gaps = []
    for k, alpha, members in zip(mats, selection.indices, neighbors):
        outsiders = [t for t in range(k.shape[0]) if t != alpha and t not in members]
        for t in members:
            for tau in outsiders:
                gaps.append(float((k[t] - k[tau]) @ p_mm))
    delta = 0.5 * min(gaps) if gaps else math.inf

    a = max(float(np.max(np.linalg.norm(k, axis=1))) for k in mats) * norm
    mu = 0.125 * (min(0.5, delta) / a) ** 2
    valid = delta > 0.0
    if scores is not None:
        valid = valid and local_optimality_check(scores, neighbors, selection).overall
    return ConeParameters(
        theta=1.0 / norm,
        delta=delta,
        a=a,
        mu=mu,
        delta_is_sentinel=not gaps,
        valid=valid,
    )


def cone_membership(p: np.ndarray, cone: ConeSpec) -> bool:
    p = np.asarray(p, dtype=float).reshape(-1)
    norm = float(np.linalg.norm(p))
    if norm == 0.0:
        return False
    return correlation(p, cone.q) >= 1.0 - cone.mu - CONE_BOUNDARY_TOL and norm >= cone.r0


def local_step_size(smoothness: float, cone: ConeParameters) -> Tuple[float, bool]:
    """Step bound min(1/L_p, mu/(1-mu)) of the local convergence regime and whether mu binds."""
    smooth_term = math.inf if smoothness <= 0.0 else 1.0 / smoothness
    mu_term = cone.mu / (1.0 - cone.mu)
    if mu_term < smooth_term:
        LOGGER.info("cone term %.3g binds the local step size (1/L_p = %.3g)", mu_term, smooth_term)
        return mu_term, True
    return smooth_term, False


def saturation_metrics(dataset: TokenDataset, p: np.ndarray) -> SaturationMetrics:
    p = as_vector(p, dataset.d, "p")
    probs = batched_softmax(np.einsum("itd,d->it", dataset.stacked_keys, p), dataset.mask)
    return saturation_from_probs(probs)


def saturation_from_probs(probs: np.ndarray) -> SaturationMetrics:
    max_probs = probs.max(axis=1)
    sparsities = probs.sum(axis=1) / np.einsum("it,it->i", probs, probs)
    return SaturationMetrics(
        avg_max_prob=float(max_probs.mean()),
        avg_sparsity=float(sparsities.mean()),
        max_probs=max_probs,
        sparsities=sparsities,
    )


def global_descent_check(
    dataset: TokenDataset,
    v: np.ndarray,
    kind: LossKind,
    p: np.ndarray,
    gmm: np.ndarray,
) -> float:
    """<grad L(p), gmm>; negative on datasets whose non-optimal tokens share one score."""
    gmm = as_vector(gmm, dataset.d, "gmm")
    if not np.any(gmm):
        raise InvalidInputError("the reference direction must be nonzero")
    return float(grad_p(dataset, AttentionParams(p=p, v=v), kind) @ gmm)


def score_gap(
    dataset: TokenDataset,
    v: np.ndarray,
    selection: TokenSelection,
    neighbors: Sequence[Sequence[int]],
) -> float:
    """Smallest gamma_{i alpha_i} - gamma_it over SVM-neighbors; +inf when there are none."""
    scores = token_scores(dataset, v)
    gaps = [
        float(scores[i][alpha] - scores[i][t])
        for i, (alpha, members) in enumerate(zip(selection.indices, neighbors))
        for t in members
    ]
    return min(gaps) if gaps else math.inf


def assumption_b_check(dataset: TokenDataset, v: np.ndarray) -> bool:
    """Unique optimal token per input and one shared score among the rest."""
    for row in token_scores(dataset, v).rows:
        if row.size == 1:
            continue
        tol = 1e-12 * (1.0 + float(np.max(np.abs(row))))
        top = int(np.argmax(row))
        rest = np.delete(row, top)
        if np.any(rest >= row[top] - tol) or float(rest.max() - rest.min()) > tol:
            return False
    return True


def gradient_correlation_ratio(
    dataset: TokenDataset,
    v: np.ndarray,
    kind: LossKind,
    p: np.ndarray,
    target: np.ndarray,
) -> float:
    """<grad, p/||p||> divided by <grad, target/||target||>."""
    gradient = grad_p(dataset, AttentionParams(p=p, v=v), kind)
    return float((gradient @ unit(p)) / (gradient @ unit(target)))


def _selected_tails(probs: np.ndarray, selection: TokenSelection) -> np.ndarray:
    # 1 - s_alpha, summed over the other tokens so it stays accurate near saturation
    return np.array([np.delete(row, alpha).sum() for row, alpha in zip(probs, selection.indices)])


def sample_cone(
    cone: ConeSpec, radius: float, count: int, rng: np.random.Generator
) -> List[np.ndarray]:
    """Points with correlation >= 1 - mu to q and norm in [radius, 2 radius]."""
    axis = unit(cone.q)
    spread = math.sqrt(2.0 * cone.mu)
    points: List[np.ndarray] = []
    while len(points) < count:
        direction = unit(axis + spread * rng.normal(size=axis.shape[0]) / math.sqrt(axis.shape[0]))
        if correlation(direction, axis) < 1.0 - cone.mu:
            continue
        points.append(direction * radius * (1.0 + rng.uniform()))
    return points


def local_gradient_bounds(
    dataset: TokenDataset,
    v: np.ndarray,
    kind: LossKind,
    svm: SvmSolution,
    selection: TokenSelection,
    cone: ConeSpec,
    samples: int = 100,
    seed: int = 0,
) -> LocalGradientBounds:
    """Measured constants c <= C with c min_i(1 - s_ia) <= -<grad, p^mm> <= C max_i(1 - s_ia)."""
    _require_optimal(svm)
    rng = np.random.default_rng(seed)
    lower, upper = math.inf, 0.0
    all_positive = True
    for p in sample_cone(cone, max(cone.r0, 1e-12), samples, rng):
        _, gradient, state = loss_and_grad_p(dataset, p, v, kind)
        value = -float(gradient @ svm.solution)
        tails = _selected_tails(state.probs, selection)
        all_positive = all_positive and value > 0.0
        if tails.min() > 0.0:
            lower = min(lower, value / float(tails.min()))
        if tails.max() > 0.0:
            upper = max(upper, value / float(tails.max()))
    return LocalGradientBounds(lower=lower, upper=upper, all_positive=all_positive, samples=samples)


def general_position_report(
    keys: TokenDataset | Sequence[np.ndarray], selection: TokenSelection
) -> GeneralPositionReport:
    """Rank of the key differences per input and overall; no general-position certificate."""
    mats = key_matrices(keys)
    selection.validate_for([k.shape[0] for k in mats])
    ranks, rows = [], []
    for k, alpha in zip(mats, selection.indices):
        diffs = np.delete(k[alpha] - k, alpha, axis=0)
        rows.append(diffs)
        ranks.append(int(np.linalg.matrix_rank(diffs)) if diffs.size else 0)
    stacked = np.vstack(rows) if any(r.size for r in rows) else np.zeros((0, mats[0].shape[1]))
    overall = int(np.linalg.matrix_rank(stacked)) if stacked.size else 0
    return GeneralPositionReport(
        ranks=ranks,
        overall_rank=overall,
        full_rank=overall == min(stacked.shape),
    )


def label_margin_probe(
    dataset: TokenDataset, v_target: np.ndarray, selection: TokenSelection, p: np.ndarray
) -> LabelMarginProbe:
    """Label margin of the selected tokens next to the label margin of the attention features.

    ``target_margin`` is min_i Y_i <x_i^p, v_target/||v_target||>, the margin the
    features reach along the head direction the joint path is expected to follow.
    """
    selection.validate_for(dataset.token_counts)
    v_target = as_vector(v_target, dataset.d, "v_target")
    if not np.any(v_target):
        raise InvalidInputError("v_target must be nonzero")
    selected = np.array([x[alpha] for x, alpha in zip(dataset.tokens, selection.indices)])
    reference = label_svm(selected, dataset.labels)
    attended = attention_features(dataset, p)
    features = label_svm(attended, dataset.labels)
    probs = batched_softmax(np.einsum("itd,d->it", dataset.stacked_keys, p), dataset.mask)
    return LabelMarginProbe(
        label_margin=reference.margin if reference.is_optimal else None,
        feature_margin=features.margin if features.is_optimal else None,
        target_margin=float(np.min(dataset.labels * (attended @ unit(v_target)))),
        max_tail=float(_selected_tails(probs, selection).max()),
    )
