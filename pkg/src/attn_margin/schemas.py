from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import DimensionMismatchError, InvalidInputError

KEY_QUERY_TOL = 1e-10


def _as_matrix(value: Any, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def as_vector(value: Any, d: int | None = None, name: str = "vector") -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if d is not None and arr.shape[0] != d:
        raise DimensionMismatchError(f"{name} has length {arr.shape[0]}, expected {d}")
    return arr


@dataclass(frozen=True, eq=False)
class TokenDataset:
    """Inputs (X_i, K_i, Y_i) of the attention model.

    Token counts may differ per input. Padded stacks are built once so the
    model can evaluate every input in a single batched pass.
    """

    tokens: Tuple[np.ndarray, ...]
    keys: Tuple[np.ndarray, ...]
    labels: np.ndarray
    key_query: Optional[np.ndarray] = None
    stacked_tokens: np.ndarray = field(init=False, repr=False, compare=False)
    stacked_keys: np.ndarray = field(init=False, repr=False, compare=False)
    mask: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.tokens:
            raise InvalidInputError("a dataset needs at least one input")
        tokens = tuple(_as_matrix(x, f"X[{i}]") for i, x in enumerate(self.tokens))
        keys = tuple(_as_matrix(k, f"K[{i}]") for i, k in enumerate(self.keys))
        if len(keys) != len(tokens):
            raise DimensionMismatchError("token and key matrices must pair up")
        d = tokens[0].shape[1]
        for i, (x, k) in enumerate(zip(tokens, keys)):
            if x.shape[0] < 1:
                raise InvalidInputError(f"input {i} has no tokens")
            if x.shape != k.shape or x.shape[1] != d:
                raise DimensionMismatchError(
                    f"input {i}: X {x.shape} and K {k.shape} must both be T x {d}"
                )
        try:
            raw = np.asarray(self.labels, dtype=float).reshape(-1)
        except (TypeError, ValueError) as exc:
            raise InvalidInputError(f"labels must be numeric: {exc}") from exc
        if raw.shape[0] != len(tokens):
            raise DimensionMismatchError("one label per input is required")
        if not np.all(np.isin(raw, (-1.0, 1.0))):
            raise InvalidInputError(f"labels must be exactly +1 or -1, got {raw.tolist()}")
        labels = raw.astype(int)
        labels.setflags(write=False)

        key_query = self.key_query
        if key_query is not None:
            key_query = _as_matrix(key_query, "W")
            if key_query.shape != (d, d):
                raise DimensionMismatchError(f"W must be {d} x {d}, got {key_query.shape}")
            worst = max(float(np.max(np.abs(k - x @ key_query.T))) for x, k in zip(tokens, keys))
            if worst > KEY_QUERY_TOL:
                raise InvalidInputError(f"keys differ from X W^T by {worst:.3e}")

        t_max = max(x.shape[0] for x in tokens)
        stacked_tokens = np.zeros((len(tokens), t_max, d))
        stacked_keys = np.zeros((len(tokens), t_max, d))
        mask = np.zeros((len(tokens), t_max), dtype=bool)
        for i, (x, k) in enumerate(zip(tokens, keys)):
            stacked_tokens[i, : x.shape[0]] = x
            stacked_keys[i, : x.shape[0]] = k
            mask[i, : x.shape[0]] = True

        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "key_query", key_query)
        object.__setattr__(self, "stacked_tokens", stacked_tokens)
        object.__setattr__(self, "stacked_keys", stacked_keys)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def build(
        cls,
        tokens: Sequence[Any],
        labels: Sequence[int],
        keys: Optional[Sequence[Any]] = None,
        key_query: Any = None,
    ) -> "TokenDataset":
        """Create a dataset, deriving K_i = X_i W^T (or K_i = X_i) when keys are omitted."""
        mats = [np.asarray(x, dtype=float) for x in tokens]
        if keys is None:
            if key_query is None:
                keys = mats
            else:
                w = np.asarray(key_query, dtype=float)
                keys = [x @ w.T for x in mats]
        return cls(tuple(mats), tuple(keys), np.asarray(labels), key_query)

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def d(self) -> int:
        return self.tokens[0].shape[1]

    @property
    def token_counts(self) -> Tuple[int, ...]:
        return tuple(x.shape[0] for x in self.tokens)

    def with_key_query(self, key_query: Any) -> "TokenDataset":
        return TokenDataset.build(self.tokens, self.labels, key_query=key_query)

    def to_json_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "d": self.d,
            "inputs": [
                {"X": x.tolist(), "K": k.tolist(), "Y": int(y)}
                for x, k, y in zip(self.tokens, self.keys, self.labels)
            ],
        }
        if self.key_query is not None:
            payload["W"] = self.key_query.tolist()
        return payload

    @classmethod
    def from_json_dict(cls, raw: Dict[str, Any]) -> "TokenDataset":
        try:
            inputs = raw["inputs"]
        except (KeyError, TypeError) as exc:
            raise InvalidInputError("dataset document needs an 'inputs' list") from exc
        key_query = raw.get("W")
        w = None if key_query is None else np.asarray(key_query, dtype=float)
        tokens, keys, labels = [], [], []
        for idx, record in enumerate(inputs):
            try:
                x = np.asarray(record["X"], dtype=float)
                labels.append(record["Y"])
            except KeyError as exc:
                raise InvalidInputError(f"input {idx} needs X and Y") from exc
            tokens.append(x)
            if "K" in record and record["K"] is not None:
                keys.append(np.asarray(record["K"], dtype=float))
            elif w is not None:
                keys.append(x @ w.T)
            else:
                keys.append(x)
        dataset = cls(tuple(tokens), tuple(keys), np.asarray(labels), w)
        if "d" in raw and int(raw["d"]) != dataset.d:
            raise DimensionMismatchError(f"declared d={raw['d']} but tokens have d={dataset.d}")
        return dataset


@dataclass(frozen=True, eq=False)
class ScoreTable:
    """Per-input token scores gamma_it = Y_i v^T x_it."""

    rows: Tuple[np.ndarray, ...]

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "ScoreTable":
        if not rows:
            raise InvalidInputError("score table is empty")
        converted = []
        for row in rows:
            arr = np.array(row, dtype=float).reshape(-1)
            if arr.size == 0:
                raise InvalidInputError("score rows must be nonempty")
            converted.append(arr)
        return cls(tuple(converted))

    @property
    def n(self) -> int:
        return len(self.rows)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.rows[i]


@dataclass(frozen=True)
class TokenSelection:
    """One token index per input (0-based), optionally with argmax tie sets."""

    indices: Tuple[int, ...]
    tie_sets: Optional[Tuple[Tuple[int, ...], ...]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if self.tie_sets is not None:
            object.__setattr__(
                self, "tie_sets", tuple(tuple(int(t) for t in ties) for ties in self.tie_sets)
            )

    @property
    def unique(self) -> bool:
        return self.tie_sets is None or all(len(ties) == 1 for ties in self.tie_sets)

    def validate_for(self, token_counts: Sequence[int]) -> None:
        if len(self.indices) != len(token_counts):
            raise DimensionMismatchError(
                f"selection has {len(self.indices)} entries for {len(token_counts)} inputs"
            )
        for i, (alpha, count) in enumerate(zip(self.indices, token_counts)):
            if not 0 <= alpha < count:
                raise InvalidInputError(f"selection index {alpha} invalid for input {i} with {count} tokens")


@dataclass(frozen=True)
class OptimalSets:
    """Optimal token sets O_i; the complement of O_i in [T_i] is the non-optimal set."""

    optimal: Tuple[Tuple[int, ...], ...]

    def __post_init__(self) -> None:
        cleaned = tuple(tuple(sorted({int(t) for t in members})) for members in self.optimal)
        if any(not members for members in cleaned):
            raise InvalidInputError("every optimal set must be nonempty")
        object.__setattr__(self, "optimal", cleaned)

    def complement(self, i: int, count: int) -> Tuple[int, ...]:
        members = set(self.optimal[i])
        if any(not 0 <= t < count for t in members):
            raise InvalidInputError(f"optimal set of input {i} has indices outside [0, {count})")
        return tuple(t for t in range(count) if t not in members)

    @property
    def combinations(self) -> int:
        return math.prod(len(members) for members in self.optimal)


@dataclass(frozen=True, eq=False)
class ConeSpec:
    """Points with correlation >= 1 - mu to q and norm >= r0."""

    q: np.ndarray
    mu: float
    r0: float = 0.0

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float).reshape(-1)
        if not np.any(q):
            raise InvalidInputError("cone direction q must be nonzero")
        if not 0.0 < self.mu < 1.0:
            raise InvalidInputError(f"cone mu must lie in (0, 1), got {self.mu}")
        if self.r0 < 0.0:
            raise InvalidInputError("cone radius r0 must be nonnegative")
        object.__setattr__(self, "q", q)


class SolverStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration_limit"


class StopReason(str, Enum):
    BUDGET = "budget"
    GRAD_TOL = "grad_tol"
    DIVERGED = "diverged"


class ResultModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)


def _vector_json(vector: Optional[np.ndarray]) -> Optional[List[float]]:
    if vector is None:
        return None
    return [float(x) for x in np.asarray(vector).reshape(-1)]


def _finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


class SvmSolution(ResultModel):
    solution: np.ndarray
    objective_norm: float
    margin: Optional[float] = None
    constraints: List[Tuple[int, int]] = Field(default_factory=list)
    active_set: List[Tuple[int, int]] = Field(default_factory=list)
    duals: np.ndarray
    status: SolverStatus
    degenerate: bool = False
    iterations: int = 0
    certificate: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None

    @property
    def is_optimal(self) -> bool:
        return self.status is SolverStatus.OPTIMAL

    @property
    def support_indices(self) -> List[int]:
        return sorted({i for i, _ in self.active_set})

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            "solution": _vector_json(self.solution),
            "norm": float(self.objective_norm),
            "margin": _finite_or_none(self.margin),
            "status": self.status.value,
            "active": [{"i": i, "t": t} for i, t in self.active_set],
            "duals": _vector_json(self.duals),
        }


class GeneralizedSvmResult(ResultModel):
    solution: SvmSolution
    selection: Optional[TokenSelection] = None
    minimizers: List[Tuple[TokenSelection, np.ndarray]] = Field(default_factory=list)
    evaluated: int = 0


class StepRecord(BaseModel):
    step: int
    iterate_norm: float
    loss: float
    grad_norm: float
    correlation: Optional[float] = None
    max_prob: float
    sparsity: float


class Trajectory(ResultModel):
    steps: List[StepRecord] = Field(default_factory=list)
    final_iterate: np.ndarray
    step_size: float
    stop_reason: StopReason
    flags: List[str] = Field(default_factory=list)
    iterates: Optional[List[np.ndarray]] = None

    @property
    def executed_steps(self) -> int:
        return len(self.steps) - 1


class BallSolution(ResultModel):
    point: np.ndarray
    loss: float
    converged: bool
    steps: int = 0
    flags: List[str] = Field(default_factory=list)


class PathPoint(ResultModel):
    radius: float
    minimizer: np.ndarray
    loss: float
    correlation: float
    converged: bool = True


class ConePathReport(ResultModel):
    points: List[PathPoint]
    norm_stalled: bool
    deviation: float


class JointPathPoint(ResultModel):
    v_radius: float
    p_radius: float
    v: np.ndarray
    p: np.ndarray
    loss: float
    v_correlation: float
    p_correlation: float
    rounds: int
    converged: bool


class WMappingReport(ResultModel):
    p_iterates: List[np.ndarray]
    w_iterates: List[np.ndarray]
    max_deviation: float


class ConeParameters(BaseModel):
    theta: float
    delta: float
    a: float
    mu: float
    delta_is_sentinel: bool = False
    valid: bool = True


class DirectionalProfile(ResultModel):
    selection: TokenSelection
    gamma: float
    minimal_set: List[Tuple[int, int]]
    delta: float
    neighbor_optimal: Optional[bool] = None


class LocalOptimality(BaseModel):
    per_input: List[bool]
    overall: bool


class LmmCandidate(ResultModel):
    selection: TokenSelection
    solution: SvmSolution
    locally_optimal: bool
    globally_optimal: bool


class SaturationMetrics(ResultModel):
    avg_max_prob: float
    avg_sparsity: float
    max_probs: np.ndarray
    sparsities: np.ndarray


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Attention weights p, prediction head v and an optional key-query matrix W.

    When W is set the model runs in W-parameterized mode and derives keys as
    X_i W^T instead of reading the dataset's key matrices.
    """

    p: np.ndarray
    v: np.ndarray
    W: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(-1))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(-1))
        if self.W is not None:
            object.__setattr__(self, "W", np.atleast_2d(np.asarray(self.W, dtype=float)))


class LocalGradientBounds(BaseModel):
    lower: float
    upper: float
    all_positive: bool
    samples: int


class LabelMarginProbe(BaseModel):
    label_margin: Optional[float]
    feature_margin: Optional[float]
    target_margin: float
    max_tail: float


class GeneralPositionReport(BaseModel):
    ranks: List[int]
    overall_rank: int
    full_rank: bool


class JointStepRecord(BaseModel):
    step: int
    v_norm: float
    p_norm: float
    loss: float
    max_prob: float
    selected_prob: Optional[float] = None
    label_prob: float


class JointTrajectory(ResultModel):
    steps: List[JointStepRecord] = Field(default_factory=list)
    final_v: np.ndarray
    final_p: np.ndarray
    step_size: float
    stop_reason: StopReason


class ScenarioCheck(BaseModel):
    name: str
    value: Optional[float] = None
    threshold: Optional[float] = None
    passed: bool
    gated: bool = True


class ScenarioReport(BaseModel):
    scenario: str
    checks: List[ScenarioCheck] = Field(default_factory=list)
    artifacts: List[str] = Field(default_factory=list)
    details: Dict[str, Any] = Field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks if check.gated)


class CensusTrial(BaseModel):
    d: int
    trial: int
    saturated: bool
    lmm_match: bool
    gmm_match: bool
    correlation: Optional[float] = None
    score_gap: Optional[float] = None


class CensusRow(BaseModel):
    d: int
    trials: int
    non_saturated: float
    lmm_matched: float
    gmm_matched: float
    mean_correlation: Optional[float] = None
    negative_gap: float = 0.0
    gap_histogram: Dict[float, int] = Field(default_factory=dict)

    @property
    def residual(self) -> float:
        return 1.0 - self.non_saturated - self.lmm_matched


class CensusReport(BaseModel):
    rows: List[CensusRow] = Field(default_factory=list)
    trials: List[CensusTrial] = Field(default_factory=list)


class LossBiasReport(ResultModel):
    score: float
    kind: str
    grad_norms: Tuple[float, float]
    probe_point: np.ndarray
    trained_norm: float
