from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog

from .errors import BudgetExceededError, DimensionMismatchError, InvalidInputError
from .schemas import (
    GeneralizedSvmResult,
    OptimalSets,
    SolverStatus,
    SvmSolution,
    TokenDataset,
    TokenSelection,
)

LOGGER = logging.getLogger(__name__)

GAP_TOL = 1e-9
MAX_SWEEPS = 100_000
POLISH_EVERY = 25
DUAL_BLOWUP = 1e12
CERTIFICATE_TOL = 1e-9
ENUMERATION_BUDGET = 1_000_000
ORACLE_MAX_CONSTRAINTS = 20
ORACLE_MAX_DIM = 4


def active_tolerance(margin: Optional[float]) -> float:
    return 1e-6 * (1.0 + (margin or 0.0))


@dataclass(frozen=True)
class ConstraintSystem:
    """Rows w_c^T p >= b_c of a minimum-norm program, labelled by (input, token)."""

    normals: np.ndarray
    offsets: np.ndarray
    labels: Tuple[Tuple[int, int], ...]
    d: int

    @property
    def size(self) -> int:
        return len(self.labels)


def key_matrices(keys: TokenDataset | Sequence[np.ndarray]) -> List[np.ndarray]:
    if isinstance(keys, TokenDataset):
        return list(keys.keys)
    mats = [np.atleast_2d(np.asarray(k, dtype=float)) for k in keys]
    if not mats:
        raise InvalidInputError("at least one key matrix is required")
    d = mats[0].shape[1]
    if any(k.shape[1] != d for k in mats):
        raise DimensionMismatchError("key matrices must share the embedding dimension")
    return mats


def selection_constraints(
    keys: Sequence[np.ndarray],
    selection: TokenSelection,
    support: Optional[Iterable[int]] = None,
    rivals: Optional[Sequence[Sequence[int]]] = None,
) -> ConstraintSystem:
    """Constraints p^T (k_{i alpha_i} - k_it) >= 1 (or >= 0 outside ``support``)."""
    selection.validate_for([k.shape[0] for k in keys])
    support_set = None if support is None else set(support)
    d = keys[0].shape[1]
    normals, offsets, labels = [], [], []
    for i, (mat, alpha) in enumerate(zip(keys, selection.indices)):
        others = rivals[i] if rivals is not None else [t for t in range(mat.shape[0]) if t != alpha]
        offset = 1.0 if support_set is None or i in support_set else 0.0
        for t in others:
            normals.append(mat[alpha] - mat[t])
            offsets.append(offset)
            labels.append((i, int(t)))
    return ConstraintSystem(
        normals=np.array(normals, dtype=float).reshape(len(labels), d),
        offsets=np.array(offsets, dtype=float),
        labels=tuple(labels),
        d=d,
    )


def _farkas_certificate(system: ConstraintSystem) -> Optional[np.ndarray]:
    """Nonnegative y with sum y_c w_c = 0 and b^T y = 1, if one exists."""
    A, b = system.normals, system.offsets
    if not np.any(b > 0):
        return None
    result = linprog(
        c=np.zeros(system.size),
        A_eq=np.vstack([A.T, b[None, :]]),
        b_eq=np.concatenate([np.zeros(system.d), [1.0]]),
        bounds=[(0.0, None)] * system.size,
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if result.status != 0 or result.x is None:
        return None
    y = np.maximum(result.x, 0.0)
    offset = float(b @ y)
    if offset <= 0.0:
        return None
    y = y / offset
    if np.linalg.norm(A.T @ y) > CERTIFICATE_TOL * max(1.0, float(np.abs(y).max())):
        LOGGER.debug("discarding inexact Farkas certificate")
        return None
    return y


def _polish(system: ConstraintSystem, support: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Exact KKT point for a guessed support set, or None if the guess is wrong."""
    A, b = system.normals, system.offsets
    rows = np.flatnonzero(support)
    if rows.size == 0:
        p = np.zeros(system.d)
        return (p, np.zeros(system.size)) if np.all(b <= 0.0) else None
    A_s = A[rows]
    gram = A_s @ A_s.T
    if np.linalg.matrix_rank(gram) < rows.size:
        return None
    lam_s = np.linalg.solve(gram, b[rows])
    if np.any(lam_s < -1e-12):
        return None
    p = A_s.T @ lam_s
    if np.any(A @ p < b - 1e-12 * (1.0 + np.abs(b))):
        return None
    lam = np.zeros(system.size)
    lam[rows] = np.maximum(lam_s, 0.0)
    return p, lam


def _coordinate_ascent(
    system: ConstraintSystem, max_sweeps: int
) -> Tuple[np.ndarray, np.ndarray, int, SolverStatus]:
    """Dual coordinate ascent on max b^T lam - ||A^T lam||^2 / 2 over lam >= 0.

    Each coordinate step is a projected gradient step scaled by 1/||w_c||^2.
    """
    A, b = system.normals, system.offsets
    sq = np.einsum("ij,ij->i", A, A)
    live = np.flatnonzero(sq > 0.0)
    lam = np.zeros(system.size)
    p = np.zeros(system.d)

    for sweep in range(1, max_sweeps + 1):
        for c in live:
            updated = max(0.0, lam[c] + (b[c] - A[c] @ p) / sq[c])
            delta = updated - lam[c]
            if delta != 0.0:
                lam[c] = updated
                p += delta * A[c]

        slack = A @ p - b
        violation = max(0.0, float(-slack.min()))
        gap = abs(float(lam @ slack))
        if violation <= GAP_TOL and gap <= GAP_TOL:
            polished = _polish(system, lam > 0.0)
            if polished is not None:
                return polished[0], polished[1], sweep, SolverStatus.OPTIMAL
            return p, lam, sweep, SolverStatus.OPTIMAL
        if float(b @ lam) - 0.5 * float(p @ p) > DUAL_BLOWUP:
            return p, lam, sweep, SolverStatus.INFEASIBLE
        if sweep % POLISH_EVERY == 0:
            polished = _polish(system, lam > 0.0)
            if polished is not None:
                return polished[0], polished[1], sweep, SolverStatus.OPTIMAL

    return p, lam, max_sweeps, SolverStatus.ITERATION_LIMIT


def _package(
    system: ConstraintSystem,
    p: np.ndarray,
    lam: np.ndarray,
    status: SolverStatus,
    iterations: int,
    certificate: Optional[np.ndarray] = None,
) -> SvmSolution:
    norm = float(np.linalg.norm(p))
    margin = 1.0 / norm if norm > 0.0 and np.any(system.offsets > 0) else None
    active: List[Tuple[int, int]] = []
    if status is SolverStatus.OPTIMAL and system.size:
        tol = active_tolerance(margin)
        slack = system.normals @ p - system.offsets
        active = [label for label, s in zip(system.labels, slack) if s <= tol]
    return SvmSolution(
        solution=p,
        objective_norm=norm,
        margin=margin,
        constraints=list(system.labels),
        active_set=active,
        duals=lam,
        status=status,
        degenerate=status is SolverStatus.OPTIMAL and norm == 0.0,
        iterations=iterations,
        certificate=certificate,
        normals=system.normals,
        offsets=system.offsets,
    )


def solve_min_norm(system: ConstraintSystem, max_sweeps: int = MAX_SWEEPS) -> SvmSolution:
    """Minimize ||p|| subject to the rows of ``system``."""
    if system.size == 0:
        return _package(system, np.zeros(system.d), np.zeros(0), SolverStatus.OPTIMAL, 0)

    sq = np.einsum("ij,ij->i", system.normals, system.normals)
    blocked = np.flatnonzero((sq == 0.0) & (system.offsets > 0.0))
    if blocked.size:
        certificate = np.zeros(system.size)
        certificate[blocked[0]] = 1.0 / system.offsets[blocked[0]]
        return _package(
            system, np.zeros(system.d), np.zeros(system.size), SolverStatus.INFEASIBLE, 0, certificate
        )

    certificate = _farkas_certificate(system)
    if certificate is not None:
        LOGGER.debug("infeasible: Farkas certificate over %d constraints", system.size)
        return _package(
            system, np.zeros(system.d), np.zeros(system.size), SolverStatus.INFEASIBLE, 0, certificate
        )

    p, lam, sweeps, status = _coordinate_ascent(system, max_sweeps)
    if status is SolverStatus.ITERATION_LIMIT:
        LOGGER.warning("min-norm solver hit the %d sweep budget", max_sweeps)
    return _package(system, p, lam, status, sweeps)


def att_svm(keys: TokenDataset | Sequence[np.ndarray], selection: TokenSelection) -> SvmSolution:
    mats = key_matrices(keys)
    return solve_min_norm(selection_constraints(mats, selection))


def relaxed_att_svm(
    keys: TokenDataset | Sequence[np.ndarray],
    selection: TokenSelection,
    support: Iterable[int],
) -> SvmSolution:
    """Margin 1 for inputs in ``support``, margin 0 for the rest."""
    mats = key_matrices(keys)
    support = set(int(i) for i in support)
    if any(not 0 <= i < len(mats) for i in support):
        raise InvalidInputError(f"support set {sorted(support)} has indices outside [0, {len(mats)})")
    return solve_min_norm(selection_constraints(mats, selection, support=support))


def label_svm(features: Sequence[np.ndarray] | np.ndarray, labels: Sequence[int]) -> SvmSolution:
    features = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels, dtype=float).reshape(-1)
    if features.shape[0] < 1:
        raise InvalidInputError("label_svm needs at least one feature")
    if labels.shape[0] != features.shape[0]:
        raise DimensionMismatchError("one label per feature is required")
    if not np.all(np.abs(labels) == 1.0):
        raise InvalidInputError("labels must be exactly +1 or -1")
    system = ConstraintSystem(
        normals=labels[:, None] * features,
        offsets=np.ones(features.shape[0]),
        labels=tuple((i, 0) for i in range(features.shape[0])),
        d=features.shape[1],
    )
    return solve_min_norm(system)


def generalized_att_svm(
    keys: TokenDataset | Sequence[np.ndarray],
    sets: OptimalSets,
    budget: int = ENUMERATION_BUDGET,
    jobs: int = 1,
) -> GeneralizedSvmResult:
    """Exact solution of the multi-optimal program by enumerating one optimal token per input.

    Every combination of minimum norm is reported in ``minimizers`` (lexicographic
    order); the first one is the canonical answer.
    """
    mats = key_matrices(keys)
    if len(sets.optimal) != len(mats):
        raise DimensionMismatchError("one optimal set per input is required")
    rivals = [sets.complement(i, k.shape[0]) for i, k in enumerate(mats)]
    total = sets.combinations
    if total > budget:
        raise BudgetExceededError(f"{total} optimal-token combinations exceed the budget of {budget}")

    combos = [TokenSelection(c) for c in itertools.product(*sets.optimal)]

    def _solve(selection: TokenSelection) -> SvmSolution:
        return solve_min_norm(selection_constraints(mats, selection, rivals=rivals))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            solutions = list(pool.map(_solve, combos))
    else:
        solutions = [_solve(c) for c in combos]

    feasible = [(c, s) for c, s in zip(combos, solutions) if s.is_optimal]
    LOGGER.info("generalized program: %d of %d combinations feasible", len(feasible), total)
    if not feasible:
        status = (
            SolverStatus.ITERATION_LIMIT
            if any(s.status is SolverStatus.ITERATION_LIMIT for s in solutions)
            else SolverStatus.INFEASIBLE
        )
        d = mats[0].shape[1]
        empty = SvmSolution(solution=np.zeros(d), objective_norm=0.0, duals=np.zeros(0), status=status)
        return GeneralizedSvmResult(solution=empty, evaluated=total)

    best = min(s.objective_norm for _, s in feasible)
    tol = 1e-9 * (1.0 + best)
    minima = [(c, s) for c, s in feasible if s.objective_norm <= best + tol]
    minima.sort(key=lambda item: item[0].indices)
    selection, solution = minima[0]
    return GeneralizedSvmResult(
        solution=solution,
        selection=selection,
        minimizers=[(c, s.solution) for c, s in minima],
        evaluated=total,
    )


def qp_oracle(keys: TokenDataset | Sequence[np.ndarray], selection: TokenSelection) -> SvmSolution:
    """Brute-force active-set enumeration of the same program as att_svm.

    Tries every constraint subset of size <= d as the active set, solves the
    equality-constrained least-norm problem and keeps candidates with
    nonnegative multipliers that satisfy every constraint.
    """
    mats = key_matrices(keys)
    system = selection_constraints(mats, selection)
    if system.size > ORACLE_MAX_CONSTRAINTS or system.d > ORACLE_MAX_DIM:
        raise BudgetExceededError(
            f"oracle handles <= {ORACLE_MAX_CONSTRAINTS} constraints and d <= {ORACLE_MAX_DIM}, "
            f"got {system.size} and {system.d}"
        )
    A, b = system.normals, system.offsets

    best: Optional[Tuple[np.ndarray, np.ndarray]] = None
    for size in range(0, min(system.d, system.size) + 1):
        for rows in itertools.combinations(range(system.size), size):
            rows = list(rows)
            if size == 0:
                p = np.zeros(system.d)
                lam_s = np.zeros(0)
            else:
                A_s = A[rows]
                if np.linalg.matrix_rank(A_s) < size:
                    continue
                lam_s = np.linalg.solve(A_s @ A_s.T, b[rows])
                if np.any(lam_s < -1e-12):
                    continue
                p = A_s.T @ lam_s
            if system.size and np.any(A @ p < b - 1e-9):
                continue
            if best is None or np.linalg.norm(p) < np.linalg.norm(best[0]):
                lam = np.zeros(system.size)
                lam[rows] = np.maximum(lam_s, 0.0)
                best = (p, lam)

    if best is None:
        return _package(system, np.zeros(system.d), np.zeros(system.size), SolverStatus.INFEASIBLE, 0)
    return _package(system, best[0], best[1], SolverStatus.OPTIMAL, 0)


def kkt_residuals(solution: SvmSolution) -> Tuple[float, float, float]:
    """(stationarity, most negative dual, worst complementary slackness) of a solution."""
    if solution.normals is None or solution.offsets is None or solution.normals.shape[0] == 0:
        return float(np.linalg.norm(solution.solution)), 0.0, 0.0
    A, b, lam = solution.normals, solution.offsets, solution.duals
    stationarity = float(np.linalg.norm(solution.solution - A.T @ lam))
    dual_floor = float(min(0.0, lam.min()))
    slackness = float(np.max(np.abs(lam * (A @ solution.solution - b))))
    return stationarity, dual_floor, slackness
