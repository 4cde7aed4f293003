"""
Reference instances and random generators
=========================================

Builtin instances follow the three-coordinate convention used for the small
planar examples: the first two coordinates are the key, the third carries
the token score. So W = diag(1, 1, 0), v = (0, 0, 1) and every label is +1.
The two-dimensional joint-training instances use W = I instead.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BudgetExceededError, InvalidInputError
from .schemas import SolverStatus, TokenDataset, TokenSelection, as_vector
from .svm import att_svm

LOGGER = logging.getLogger(__name__)

PLANAR_KEY_QUERY = np.diag([1.0, 1.0, 0.0])
PLANAR_HEAD = np.array([0.0, 0.0, 1.0])
ASSUMPTION_B_ATTEMPTS = 100


@dataclass(frozen=True)
class BuiltinInstance:
    name: str
    description: str
    dataset: TokenDataset
    v: np.ndarray
    selections: Dict[str, TokenSelection] = field(default_factory=dict)
    figure_approximate: bool = False

    def target(self, selection_name: str) -> np.ndarray:
        """ATT-SVM direction of one of the named selections."""
        try:
            selection = self.selections[selection_name]
        except KeyError as exc:
            raise InvalidInputError(
                f"{self.name} has no selection {selection_name!r}; known: {sorted(self.selections)}"
            ) from exc
        solution = att_svm(self.dataset, selection)
        if not solution.is_optimal:
            raise InvalidInputError(f"{self.name}/{selection_name} has no ATT-SVM solution")
        return solution.solution


def _planar(inputs: Sequence[Sequence[Tuple[float, float, float]]]) -> TokenDataset:
    tokens = [np.array(rows, dtype=float) for rows in inputs]
    return TokenDataset.build(tokens, [1] * len(tokens), key_query=PLANAR_KEY_QUERY)


def _fig1_global() -> BuiltinInstance:
    dataset = _planar([[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (-0.1, 1.0, 1.0)]])
    return BuiltinInstance(
        name="fig1_global",
        description="one input, three tokens; GD converges to the globally optimal max-margin direction",
        dataset=dataset,
        v=PLANAR_HEAD,
        selections={"gmm": TokenSelection((2,))},
    )


def _fig1_local() -> BuiltinInstance:
    dataset = _planar([[(1.0, 0.0, 0.9), (0.0, 0.0, 0.1), (-1.0, 0.5, 1.0)]])
    return BuiltinInstance(
        name="fig1_local",
        description="one input with a locally optimal token (score 0.9) next to the global one (score 1.0)",
        dataset=dataset,
        v=PLANAR_HEAD,
        selections={"lmm": TokenSelection((0,)), "gmm": TokenSelection((2,))},
        figure_approximate=True,
    )


def _fig1_multi() -> BuiltinInstance:
    dataset = _planar(
        [
            [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.5, 1.0, 1.0)],
            [(0.0, 0.0, 0.0), (-1.0, 0.3, 0.0), (-0.5, 1.2, 1.0)],
        ]
    )
    return BuiltinInstance(
        name="fig1_multi",
        description="two inputs sharing one max-margin direction",
        dataset=dataset,
        v=PLANAR_HEAD,
        selections={"gmm": TokenSelection((2, 2))},
        figure_approximate=True,
    )


def _fig2_support() -> BuiltinInstance:
    shared = (0.0, 0.0)
    tokens = [np.array([opt, shared]) for opt in ((-1.0, 1.0), (0.5, 1.0), (1.0, 1.0))]
    return BuiltinInstance(
        name="fig2_support",
        description="joint (v, p) training where every input is a label-SVM support vector",
        dataset=TokenDataset.build(tokens, [1, 1, 1], key_query=np.eye(2)),
        v=np.array([0.0, 1.0]),
        selections={"gmm": TokenSelection((0, 0, 0))},
    )


def _fig2_nonsupport() -> BuiltinInstance:
    tokens = [
        np.array([(-1.0, 1.0), (0.0, 0.0)]),
        np.array([(0.5, 1.5), (0.0, 0.0), (1.0, 1.0)]),
        np.array([(1.0, 1.0), (0.0, 0.0)]),
    ]
    return BuiltinInstance(
        name="fig2_nonsupport",
        description="joint training where the middle input is not a label-SVM support vector",
        dataset=TokenDataset.build(tokens, [1, 1, 1], key_query=np.eye(2)),
        v=np.array([0.0, 1.0]),
        selections={"gmm": TokenSelection((0, 0, 0))},
        figure_approximate=True,
    )


def loss_bias_instance(c: float) -> BuiltinInstance:
    """Two inputs whose optimal tokens score 1 and ``c``."""
    if not c > 0.0:
        raise InvalidInputError(f"score C must be positive, got {c}")
    dataset = _planar(
        [
            [(1.0, 0.0, 1.0), (0.0, 0.0, 0.0)],
            [(0.0, 1.0, float(c)), (0.0, 0.0, 0.0)],
        ]
    )
    return BuiltinInstance(
        name=f"loss_bias({c:g})",
        description=f"two optimal tokens with scores 1 and {c:g}",
        dataset=dataset,
        v=PLANAR_HEAD,
        selections={"gmm": TokenSelection((0, 0))},
    )


BUILTINS: Dict[str, Callable[[], BuiltinInstance]] = {
    "fig1_global": _fig1_global,
    "fig1_local": _fig1_local,
    "fig1_multi": _fig1_multi,
    "fig2_support": _fig2_support,
    "fig2_nonsupport": _fig2_nonsupport,
}


def builtin_names() -> List[str]:
    return [*BUILTINS, "loss_bias(C)"]


def builtin_dataset(name: str) -> BuiltinInstance:
    """Look up a builtin by name; ``loss_bias(3)`` style names take the score C."""
    key = name.strip()
    if key.startswith("loss_bias(") and key.endswith(")"):
        try:
            c = float(key[len("loss_bias(") : -1])
        except ValueError as exc:
            raise InvalidInputError(f"cannot parse score in {name!r}") from exc
        return loss_bias_instance(c)
    try:
        return BUILTINS[key]()
    except KeyError as exc:
        raise InvalidInputError(f"unknown builtin {name!r}; known: {', '.join(builtin_names())}") from exc


def _unit_rows(rng: np.random.Generator, count: int, d: int) -> np.ndarray:
    rows = rng.normal(size=(count, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _check_sizes(n: int, T: int, d: int) -> None:
    if n < 1 or T < 1 or d < 1:
        raise InvalidInputError(f"n, T and d must be positive, got n={n}, T={T}, d={d}")


def generate_random_dataset(n: int, T: int, d: int, seed: int | Sequence[int]) -> Tuple[TokenDataset, np.ndarray]:
    """Tokens and head uniform on the unit sphere, labels uniform in {-1, +1}, W = I."""
    _check_sizes(n, T, d)
    rng = np.random.default_rng(seed)
    tokens = [_unit_rows(rng, T, d) for _ in range(n)]
    v = _unit_rows(rng, 1, d)[0]
    labels = rng.choice([-1, 1], size=n)
    return TokenDataset.build(tokens, labels, key_query=np.eye(d)), v


def generate_assumption_b_dataset(n: int, T: int, d: int, seed: int | Sequence[int]) -> Tuple[TokenDataset, np.ndarray]:
    """Random instance with one optimal token per input (score 1) and all others at score 0.

    Keys live in the first d - 1 coordinates and the last coordinate carries
    the score. Draws repeat until the optimal selection has an ATT-SVM solution.
    """
    _check_sizes(n, T, d)
    if d < 2:
        raise InvalidInputError("the score coordinate needs d >= 2")
    if T < 2:
        raise InvalidInputError("at least two tokens per input are needed for distinct scores")
    rng = np.random.default_rng(seed)
    key_query = np.diag([1.0] * (d - 1) + [0.0])
    v = np.zeros(d)
    v[-1] = 1.0

    for attempt in range(1, ASSUMPTION_B_ATTEMPTS + 1):
        tokens: List[np.ndarray] = []
        optimal: List[int] = []
        for _ in range(n):
            x = np.zeros((T, d))
            x[:, :-1] = rng.normal(size=(T, d - 1))
            alpha = int(rng.integers(T))
            x[alpha, -1] = 1.0
            tokens.append(x)
            optimal.append(alpha)
        dataset = TokenDataset.build(tokens, [1] * n, key_query=key_query)
        if att_svm(dataset, TokenSelection(tuple(optimal))).status is SolverStatus.OPTIMAL:
            LOGGER.debug("assumption-B instance found after %d draw(s)", attempt)
            return dataset, v
    raise BudgetExceededError(f"no feasible assumption-B instance in {ASSUMPTION_B_ATTEMPTS} draws")


def save_dataset(dataset: TokenDataset, path: Path, v: Optional[np.ndarray] = None) -> Path:
    """Write the dataset (and optionally the head v) as JSON."""
    payload = dataset.to_json_dict()
    if v is not None:
        payload["v"] = as_vector(v, dataset.d, "v").tolist()
    path = Path(path).expanduser()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def load_dataset(path: Path) -> Tuple[TokenDataset, Optional[np.ndarray]]:
    path = Path(path).expanduser()
    try:
        with path.open("r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path} is not valid JSON: {exc}") from exc
    dataset = TokenDataset.from_json_dict(raw)
    v = raw.get("v") if isinstance(raw, dict) else None
    return dataset, None if v is None else as_vector(v, dataset.d, "v")
