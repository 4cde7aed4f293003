from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Optional, Tuple

import numpy as np

from .errors import DimensionMismatchError, InvalidInputError, InvariantViolationError, ModeError
from .linalg import spectral_norm
from .losses import LossKind, loss_constants, loss_derivative, loss_value
from .schemas import AttentionParams, ScoreTable, TokenDataset, as_vector

LOGGER = logging.getLogger(__name__)

KEY_LEMMA_SLACK = 1e-12


def _checked_logits(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.size == 0:
        raise InvalidInputError("softmax needs a nonempty vector")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("softmax input has non-finite entries")
    return a


def softmax(a: np.ndarray) -> np.ndarray:
    a = _checked_logits(a)
    weights = np.exp(a - a.max())
    return weights / weights.sum()


def softmax_jacobian(a: np.ndarray) -> np.ndarray:
    s = softmax(a)
    return np.diag(s) - np.outer(s, s)


@dataclass(frozen=True)
class ModelState:
    """Everything one batched forward pass produces.

    Arrays are padded to the longest input; padded slots carry zero probability.
    """

    probs: np.ndarray  # (n, T) softmax weights
    scores: np.ndarray  # (n, T) gamma_it
    margins: np.ndarray  # (n,) Y_i f(X_i)
    loss_terms: np.ndarray  # (n,) l(Y_i f(X_i))
    derivatives: np.ndarray  # (n,) l'(Y_i f(X_i))
    weighted: np.ndarray  # (n, T) S'(a_i) gamma_i

    @property
    def loss(self) -> float:
        return float(self.loss_terms.mean())


def _check_dims(dataset: TokenDataset, params: AttentionParams) -> None:
    d = dataset.d
    as_vector(params.p, d, "p")
    as_vector(params.v, d, "v")
    if params.W is not None and params.W.shape != (d, d):
        raise DimensionMismatchError(f"W must be {d} x {d}, got {params.W.shape}")


def batched_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def logits(dataset: TokenDataset, params: AttentionParams) -> np.ndarray:
    if params.W is None:
        return np.einsum("itd,d->it", dataset.stacked_keys, params.p)
    q = params.W.T @ params.p
    return np.einsum("itd,d->it", dataset.stacked_tokens, q)


def padded_scores(dataset: TokenDataset, v: np.ndarray) -> np.ndarray:
    return dataset.labels[:, None] * np.einsum("itd,d->it", dataset.stacked_tokens, v)


def forward(dataset: TokenDataset, params: AttentionParams, kind: LossKind) -> ModelState:
    _check_dims(dataset, params)
    probs = batched_softmax(logits(dataset, params), dataset.mask)
    scores = padded_scores(dataset, params.v)
    margins = np.einsum("it,it->i", probs, scores)
    # gamma_t - sum_tau s_tau gamma_tau as sum_tau s_tau (gamma_t - gamma_tau), which
    # keeps its precision once one token dominates the softmax
    spread = scores[:, :, None] - scores[:, None, :]
    centered = np.einsum("itk,ik->it", spread, probs)
    return ModelState(
        probs=probs,
        scores=scores,
        margins=margins,
        loss_terms=loss_value(kind, margins),
        derivatives=loss_derivative(kind, margins),
        weighted=probs * centered,
    )


def attention_features(dataset: TokenDataset, p: np.ndarray) -> np.ndarray:
    """Rows x_i^p = X_i^T softmax(K_i p), one per input."""
    p = as_vector(p, dataset.d, "p")
    probs = batched_softmax(np.einsum("itd,d->it", dataset.stacked_keys, p), dataset.mask)
    return np.einsum("it,itd->id", probs, dataset.stacked_tokens)


def predict(dataset: TokenDataset, params: AttentionParams) -> np.ndarray:
    _check_dims(dataset, params)
    probs = batched_softmax(logits(dataset, params), dataset.mask)
    return np.einsum("it,itd,d->i", probs, dataset.stacked_tokens, params.v)


def loss(dataset: TokenDataset, params: AttentionParams, kind: LossKind) -> float:
    return forward(dataset, params, kind).loss


def _query_gradient(dataset: TokenDataset, state: ModelState) -> np.ndarray:
    return np.einsum("i,itd,it->d", state.derivatives, dataset.stacked_tokens, state.weighted) / dataset.n


def grad_p(dataset: TokenDataset, params: AttentionParams, kind: LossKind) -> np.ndarray:
    state = forward(dataset, params, kind)
    if params.W is not None:
        return params.W @ _query_gradient(dataset, state)
    return np.einsum("i,itd,it->d", state.derivatives, dataset.stacked_keys, state.weighted) / dataset.n


def grad_v(dataset: TokenDataset, params: AttentionParams, kind: LossKind) -> np.ndarray:
    state = forward(dataset, params, kind)
    features = np.einsum("it,itd->id", state.probs, dataset.stacked_tokens)
    return np.einsum("i,i,id->d", state.derivatives, dataset.labels, features) / dataset.n


def grad_W(dataset: TokenDataset, params: AttentionParams, kind: LossKind) -> np.ndarray:
    if params.W is None:
        raise ModeError("grad_W needs W-parameterized attention params")
    state = forward(dataset, params, kind)
    return np.outer(params.p, _query_gradient(dataset, state))


def loss_and_grad_p(
    dataset: TokenDataset, p: np.ndarray, v: np.ndarray, kind: LossKind
) -> Tuple[float, np.ndarray, ModelState]:
    """Loss, p-gradient and forward state from a single pass (dataset keys)."""
    state = forward(dataset, AttentionParams(p=p, v=v), kind)
    grad = np.einsum("i,itd,it->d", state.derivatives, dataset.stacked_keys, state.weighted) / dataset.n
    return state.loss, grad, state


def per_input_grad_p(dataset: TokenDataset, params: AttentionParams, kind: LossKind) -> np.ndarray:
    """Per-input gradients l'_i K_i^T S'(a_i) gamma_i as rows (no 1/n factor)."""
    state = forward(dataset, params, kind)
    return np.einsum("i,itd,it->id", state.derivatives, dataset.stacked_keys, state.weighted)


def token_scores(dataset: TokenDataset, v: np.ndarray) -> ScoreTable:
    v = as_vector(v, dataset.d, "v")
    return ScoreTable(tuple(y * (x @ v) for x, y in zip(dataset.tokens, dataset.labels)))


def smoothness_bound(
    dataset: TokenDataset,
    v: np.ndarray,
    kind: LossKind,
    W: Optional[np.ndarray] = None,
    parameterization: Literal["p", "W"] = "p",
) -> float:
    """Smoothness constant L_p of p -> L(p).

    L_p = (1/n) sum_i [M0 ||v||^2 ||W||^2 ||X_i||^4 + 3 M1 ||v|| ||W||^2 ||X_i||^3].
    In p-only mode without W the key norm ||W|| ||X_i|| is replaced by ||K_i||,
    which is the identity-W value whenever K_i = X_i.
    """
    v = as_vector(v, dataset.d, "v")
    if parameterization == "W" and W is None:
        raise ModeError("the W-parameterized smoothness constant needs W")
    if W is None:
        W = dataset.key_query
    w_norm = None if W is None else spectral_norm(W)

    v_norm = float(np.linalg.norm(v))
    bound = v_norm * max(float(np.max(np.linalg.norm(x, axis=1))) for x in dataset.tokens)
    constants = loss_constants(kind, bound)

    total = 0.0
    for x, k in zip(dataset.tokens, dataset.keys):
        x_norm = spectral_norm(x)
        key_norm = w_norm * x_norm if w_norm is not None else spectral_norm(k)
        total += constants.m0 * v_norm**2 * key_norm**2 * x_norm**2
        total += 3.0 * constants.m1 * v_norm * key_norm**2 * x_norm
    value = total / dataset.n
    LOGGER.debug("smoothness bound %.6g for %s loss (B=%.4g)", value, kind.value, bound)
    return value


def key_lemma_residual(a: np.ndarray, s: np.ndarray, gamma: np.ndarray) -> Tuple[float, float]:
    """Residual of the first-token expansion of a^T S'(.) gamma and its bound 2 Gamma A (1 - s_1)^2."""
    a = np.asarray(a, dtype=float).reshape(-1)
    s = np.asarray(s, dtype=float).reshape(-1)
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if not (a.size == s.size == gamma.size) or a.size == 0:
        raise DimensionMismatchError("a, s and gamma must share one nonzero length")
    if np.any(s < 0.0) or abs(float(s.sum()) - 1.0) > 1e-9:
        raise InvalidInputError("s must be a probability vector")

    exact = a @ (s * gamma) - (a @ s) * (s @ gamma)
    expansion = np.sum((a[0] - a[1:]) * s[1:] * (gamma[0] - gamma[1:]))
    residual = float(abs(exact - expansion))
    spread = float(gamma.max() - gamma.min())
    tail = float(s[1:].sum())
    bound = 2.0 * spread * float(np.max(np.abs(a))) * tail**2
    if residual > bound + KEY_LEMMA_SLACK:
        raise InvariantViolationError(f"key lemma residual {residual:.3e} exceeds bound {bound:.3e}")
    return residual, bound
