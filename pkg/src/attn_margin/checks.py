"""
Property suites run by ``attn-margin check``
============================================

Each suite draws its random instances from ``default_rng([seed, case])`` and
returns a :class:`ScenarioCheck` carrying the worst observed value.
"""

from __future__ import annotations

import logging
from typing import Callable, Dict, List

import numpy as np

from .datasets import generate_assumption_b_dataset, generate_random_dataset
from .errors import InvariantViolationError
from .geometry import global_descent_check, optimal_tokens
from .losses import LossKind
from .model import grad_p, grad_v, grad_W, key_lemma_residual, loss, smoothness_bound, softmax, token_scores
from .optimizers import gd, gd_on_W
from .schemas import AttentionParams, ScenarioCheck, SolverStatus, TokenDataset, TokenSelection
from .svm import att_svm, qp_oracle

LOGGER = logging.getLogger(__name__)

FD_STEP = 1e-6
FD_TOL = 1e-6
# central differences with step 1e-6 carry about 1e-10 roundoff per entry
FD_NORM_FLOOR = 1e-3
SVM_POINT_TOL = 1e-6
SVM_OBJECTIVE_TOL = 1e-9
DESCENT_SLACK = 1e-12


def _finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = FD_STEP
        grad[idx] = (f(x + e) - f(x - e)) / (2.0 * FD_STEP)
    return grad


def _relative_error(exact: np.ndarray, approx: np.ndarray) -> float:
    """Error relative to ||exact||; the floor only absorbs finite-difference roundoff."""
    return float(np.linalg.norm(exact - approx) / (np.linalg.norm(exact) + FD_NORM_FLOOR))


def gradient_suite(seed: int, cases: int = 100) -> ScenarioCheck:
    """grad_p, grad_v and grad_W against central differences."""
    worst = 0.0
    for case in range(cases):
        rng = np.random.default_rng([seed, case])
        n, T, d = int(rng.integers(1, 6)), int(rng.integers(1, 9)), int(rng.integers(1, 7))
        dataset, v = generate_random_dataset(n, T, d, [seed, case])
        kind = LossKind.LOGISTIC if case % 2 == 0 else LossKind.EXPONENTIAL
        p = rng.normal(size=d)
        W = rng.normal(size=(d, d))
        base = AttentionParams(p=p, v=v)

        fd_p = _finite_difference(lambda x: loss(dataset, AttentionParams(p=x, v=v), kind), p)
        fd_v = _finite_difference(lambda x: loss(dataset, AttentionParams(p=p, v=x), kind), v)
        raw = dataset.with_key_query(np.eye(d))
        fd_w = _finite_difference(lambda x: loss(raw, AttentionParams(p=p, v=v, W=x), kind), W)
        worst = max(
            worst,
            _relative_error(grad_p(dataset, base, kind), fd_p),
            _relative_error(grad_v(dataset, base, kind), fd_v),
            _relative_error(grad_W(raw, AttentionParams(p=p, v=v, W=W), kind), fd_w),
        )
    return ScenarioCheck(name="gradients_vs_finite_differences", value=worst, threshold=FD_TOL, passed=worst <= FD_TOL)


def svm_oracle_suite(seed: int, cases: int = 200) -> ScenarioCheck:
    """att_svm against brute-force active-set enumeration on small programs."""
    worst = 0.0
    mismatched = 0
    for case in range(cases):
        rng = np.random.default_rng([seed, case])
        d = int(rng.integers(1, 5))
        n = int(rng.integers(1, 4))
        counts = [int(rng.integers(1, 6)) for _ in range(n)]
        while sum(counts) - n > 20:
            counts[int(np.argmax(counts))] -= 1
        keys = [rng.normal(size=(count, d)) for count in counts]
        selection = TokenSelection(tuple(int(rng.integers(count)) for count in counts))
        fast, slow = att_svm(keys, selection), qp_oracle(keys, selection)
        if fast.status is not slow.status:
            mismatched += 1
            LOGGER.warning("case %d: att_svm %s vs oracle %s", case, fast.status.value, slow.status.value)
            continue
        if fast.status is SolverStatus.OPTIMAL:
            gap = abs(fast.objective_norm**2 - slow.objective_norm**2)
            point = float(np.linalg.norm(fast.solution - slow.solution))
            if gap > SVM_OBJECTIVE_TOL * (1.0 + slow.objective_norm**2):
                mismatched += 1
            worst = max(worst, point)
    passed = mismatched == 0 and worst <= SVM_POINT_TOL
    return ScenarioCheck(name="svm_matches_oracle", value=worst, threshold=SVM_POINT_TOL, passed=passed)


def descent_suite(seed: int, cases: int = 100, steps: int = 500) -> ScenarioCheck:
    """L(p+) - L(p) <= -(eta/2) ||grad||^2 along GD with eta = 0.5 / L_p."""
    worst = -np.inf
    for case in range(cases):
        dataset, v = generate_random_dataset(3, 4, 3, [seed, case])
        eta = 0.5 / smoothness_bound(dataset, v, LossKind.LOGISTIC)
        run = gd(dataset, v, LossKind.LOGISTIC, np.zeros(dataset.d), eta=eta, max_steps=steps, grad_tol=0.0)
        for before, after in zip(run.steps, run.steps[1:]):
            excess = after.loss - before.loss + 0.5 * eta * before.grad_norm**2
            worst = max(worst, excess)
    return ScenarioCheck(name="descent_lemma", value=float(worst), threshold=DESCENT_SLACK, passed=worst <= DESCENT_SLACK)


def _gmm_direction(dataset: TokenDataset, v: np.ndarray) -> np.ndarray:
    return att_svm(dataset, optimal_tokens(token_scores(dataset, v))).solution


def global_descent_suite(seed: int, instances: int = 20, points: int = 50) -> ScenarioCheck:
    """<grad L(p), p^mm*> < 0 at random p with ||p|| <= 10 on assumption-B instances."""
    worst = -np.inf
    for case in range(instances):
        dataset, v = generate_assumption_b_dataset(3, 4, 3, [seed, case])
        gmm = _gmm_direction(dataset, v)
        rng = np.random.default_rng([seed, case, 1])
        for _ in range(points):
            direction = rng.normal(size=dataset.d)
            p = direction / np.linalg.norm(direction) * 10.0 * rng.uniform()
            worst = max(worst, global_descent_check(dataset, v, LossKind.LOGISTIC, p, gmm))
    return ScenarioCheck(name="global_descent_sign", value=float(worst), threshold=0.0, passed=worst < 0.0)


def key_lemma_suite(seed: int, cases: int = 1000) -> ScenarioCheck:
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(cases):
        T = int(rng.integers(2, 9))
        logits = rng.normal(size=T)
        logits[0] += rng.uniform(0.0, 10.0)
        try:
            key_lemma_residual(rng.normal(size=T), softmax(logits), rng.normal(size=T))
        except InvariantViolationError:
            violations += 1
    return ScenarioCheck(name="key_lemma_bound", value=float(violations), threshold=0.0, passed=violations == 0)


def w_mapping_suite(seed: int, instances: int = 20, steps: int = 100) -> ScenarioCheck:
    worst = 0.0
    for case in range(instances):
        dataset, v = generate_random_dataset(3, 4, 4, [seed, case])
        rng = np.random.default_rng([seed, case, 2])
        report = gd_on_W(dataset, v, LossKind.LOGISTIC, rng.normal(size=4), 0.1 * rng.normal(size=4), 0.1, steps)
        worst = max(worst, report.max_deviation)
    return ScenarioCheck(name="w_to_p_mapping", value=worst, threshold=1e-8, passed=worst <= 1e-8)


SUITES: Dict[str, Callable[[int], ScenarioCheck]] = {
    "gradients": gradient_suite,
    "svm": svm_oracle_suite,
    "descent": descent_suite,
    "global_descent": global_descent_suite,
    "key_lemma": key_lemma_suite,
    "w_mapping": w_mapping_suite,
}


def run_checks(seed: int = 0, only: List[str] | None = None) -> List[ScenarioCheck]:
    results = []
    for name, suite in SUITES.items():
        if only and name not in only:
            continue
        LOGGER.info("running property suite %s", name)
        results.append(suite(seed))
    return results
