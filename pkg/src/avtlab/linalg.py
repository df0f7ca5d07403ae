"""Power iteration for the dominant eigenpair of small symmetric matrices.

Used to extract the event-relevance direction of a scene's Gram matrix of
per-sample event probabilities. Self-contained on purpose: tests compare it
against a dense eigensolver, so it must not call one itself.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, IterationLimitError, ShapeError

RESIDUAL_BOUND = 1e-8
DEGENERATE_GAP = 1e-10


def power_iteration(g: np.ndarray, tol: float = 1e-12,
                    max_iter: int = 10000) -> tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric entrywise-nonnegative matrix.

    Starts from the normalised all-ones vector, so the iterates stay
    entrywise nonnegative (Perron orientation) and the returned eigenvector
    is unit-norm. On a (near-)degenerate dominant eigenvalue the result is
    the deterministic tie-break: the lexicographically largest axis vector
    that is itself a dominant eigenvector, falling back to the final iterate
    with its first coordinate made nonnegative.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeError(f"power_iteration expects a square matrix, got {g.shape}")
    if not np.allclose(g, g.T, atol=1e-9 * max(1.0, np.abs(g).max())):
        raise DegenerateInputError("matrix is not symmetric")
    if np.any(g < 0):
        raise DegenerateInputError("matrix has negative entries")
    if not np.any(g):
        raise DegenerateInputError("matrix is all-zero")

    c = g.shape[0]
    v = np.ones(c) / np.sqrt(c)
    lam = float(v @ g @ v)
    residual = float(np.linalg.norm(g @ v - lam * v))
    converged = residual <= tol * max(1.0, abs(lam))
    for _ in range(max_iter):
        if converged:
            break
        w = g @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # v fell in the nullspace; nonneg start makes this unreachable
            # unless g is all-zero, which was rejected above.
            raise DegenerateInputError("iteration collapsed to the nullspace")
        v = w / nw
        lam = float(v @ g @ v)
        residual = float(np.linalg.norm(g @ v - lam * v))
        converged = residual <= tol * max(1.0, abs(lam))

    if _dominant_gap(g, lam, v) < DEGENERATE_GAP:
        axis = _axis_tiebreak(g, lam)
        if axis is not None:
            return lam, axis
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
    elif not converged:
        raise IterationLimitError(
            f"power iteration failed to converge: residual {residual:.3e} "
            f"after {max_iter} iterations")

    v = np.maximum(v, 0.0)
    v /= np.linalg.norm(v)
    lam = float(v @ g @ v)
    residual = float(np.linalg.norm(g @ v - lam * v))
    if residual > RESIDUAL_BOUND * max(1.0, abs(lam)):
        raise IterationLimitError(
            f"eigenpair residual {residual:.3e} exceeds bound")
    return lam, v


def _dominant_gap(g: np.ndarray, lam: float, v: np.ndarray) -> float:
    """Estimate lambda_1 - lambda_2 by deflated power iteration."""
    deflated = g - lam * np.outer(v, v)
    w = np.ones(g.shape[0])
    w -= (w @ v) * v
    if np.linalg.norm(w) < 1e-8:
        w = np.zeros(g.shape[0])
        w[0] = 1.0
        w -= (w @ v) * v
        if np.linalg.norm(w) < 1e-8:
            return abs(lam)  # rank one in a 1-d space: gap is the eigenvalue
    w /= np.linalg.norm(w)
    lam2 = 0.0
    for _ in range(200):
        u = deflated @ w
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return abs(lam)
        w = u / nu
        lam2 = float(w @ deflated @ w)
    return abs(lam) - abs(lam2)


def _axis_tiebreak(g: np.ndarray, lam: float) -> np.ndarray | None:
    scale = max(1.0, abs(lam))
    for i in range(g.shape[0]):
        e = np.zeros(g.shape[0])
        e[i] = 1.0
        if np.linalg.norm(g @ e - lam * e) <= 1e-8 * scale:
            return e
    return None
