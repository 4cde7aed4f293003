from __future__ import annotations

import numpy as np

SPECTRAL_TOL = 1e-10
SPECTRAL_MAX_ITER = 500


def spectral_norm(
    matrix: np.ndarray,
    tol: float = SPECTRAL_TOL,
    max_iter: int = SPECTRAL_MAX_ITER,
    seed: int = 0,
) -> float:
    """Largest singular value by power iteration on M^T M.

    Stops when the residual ||G x - lam x|| drops below ``tol`` (scaled by the
    eigenvalue) or after ``max_iter`` rounds.
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.size == 0:
        return 0.0
    gram = matrix.T @ matrix
    if not np.any(gram):
        return 0.0

    rng = np.random.default_rng(seed)
    x = rng.normal(size=gram.shape[0])
    x /= np.linalg.norm(x)

    lam = 0.0
    for _ in range(max_iter):
        y = gram @ x
        y_norm = np.linalg.norm(y)
        if y_norm == 0.0:
            x = rng.normal(size=gram.shape[0])
            x /= np.linalg.norm(x)
            continue
        lam = float(x @ y)
        x = y / y_norm
        residual = np.linalg.norm(gram @ x - lam * x)
        if residual <= tol * max(1.0, abs(lam)):
            break
    # one more Rayleigh quotient on the final iterate
    lam = max(lam, float(x @ (gram @ x)))
    return float(np.sqrt(max(lam, 0.0)))


def correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors; 0 when either is zero."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def unit(vector: np.ndarray) -> np.ndarray:
    vector = np.asarray(vector, dtype=float)
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        return vector.copy()
    return vector / norm
