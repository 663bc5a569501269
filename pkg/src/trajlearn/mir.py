"""Multi-class iterative re-ranking of classifier scores, and rank-score fusion.

Every score is repeatedly reduced by an exponentially weighted sum of the other
classes' scores for the same instance, sorted in descending order. Updates within
one iteration all read the previous iteration's matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classify import ScoreMatrix
from .errors import DataError, GeometryError


@dataclass(frozen=True)
class MirParams:
    eta: float = 0.5
    alpha: float = 1.0
    max_iters: int = 5
    convergence_tol: float = 1e-9

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


def _competitor_weights(K: int, alpha: float) -> np.ndarray:
    """M[p, q]: weight of the sorted score at position p when the entry at position q
    is being updated. Removing position q shifts later positions up by one rank."""
    p = np.arange(K)[:, None]
    q = np.arange(K)[None, :]
    rank = np.where(p < q, p + 1, p)  # 1-based rank inside the (K-1)-vector
    return np.where(p == q, 0.0, np.exp(-alpha * rank))


def competitor_penalty(P: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """sum_r exp(-alpha r) * (r-th largest of the other scores in the row), for every entry."""
    N, K = P.shape
    order = np.argsort(-P, axis=1, kind="stable")
    sorted_rows = np.take_along_axis(P, order, axis=1)
    pen_sorted = sorted_rows @ _competitor_weights(K, alpha)
    out = np.empty_like(P)
    np.put_along_axis(out, order, pen_sorted, axis=1)
    return out


def mir_rerank(P: ScoreMatrix | np.ndarray, params: MirParams = MirParams()):
    """Run up to ``max_iters - 1`` synchronous re-ranking sweeps.

    Returns ``(P_final, iterations_used)``; ``P_final`` has the input's type. Stops
    early once the largest score change drops below ``convergence_tol``.
    """
    scores = P.scores if isinstance(P, ScoreMatrix) else np.asarray(P, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise GeometryError("re-ranking needs a score matrix with at least two classes")
    if not np.all(np.isfinite(scores)):
        raise DataError("score matrix contains NaN or infinite values")
    cur = scores.copy()
    used = 0
    for w in range(1, params.max_iters):
        change = params.eta ** (w - 1) * competitor_penalty(cur, params.alpha)
        cur = cur - change
        used = w
        if np.abs(change).max() < params.convergence_tol:
            break
    return (P.with_scores(cur) if isinstance(P, ScoreMatrix) else cur), used


def mir_trace(P: np.ndarray, params: MirParams = MirParams()) -> list[np.ndarray]:
    """Score matrices after 0, 1, ..., max_iters-1 sweeps (no early stop)."""
    cur = np.asarray(P, dtype=np.float64).copy()
    out = [cur]
    for w in range(1, params.max_iters):
        cur = cur - params.eta ** (w - 1) * competitor_penalty(cur, params.alpha)
        out.append(cur)
    return out


def _standardize_columns(P: np.ndarray, std_floor: float = 1e-12) -> np.ndarray:
    lo, hi = P.min(axis=0), P.max(axis=0)
    span = hi - lo
    scaled = np.where(span > 0, (P - lo) / np.where(span > 0, span, 1.0), 0.0)
    std = scaled.std(axis=0)
    centered = scaled - scaled.mean(axis=0)
    return np.where(std > std_floor, centered / np.where(std > std_floor, std, 1.0), 0.0)


def rank_score_fuse(P_final: ScoreMatrix | np.ndarray, P_orig: ScoreMatrix | np.ndarray):
    """Min-max scale then z-score each column of the re-ranked scores, and add the originals."""
    a = P_final.scores if isinstance(P_final, ScoreMatrix) else np.asarray(P_final, dtype=np.float64)
    b = P_orig.scores if isinstance(P_orig, ScoreMatrix) else np.asarray(P_orig, dtype=np.float64)
    if a.shape != b.shape:
        raise GeometryError(f"score matrices differ in shape: {a.shape} vs {b.shape}")
    fused = _standardize_columns(a) + b
    return P_orig.with_scores(fused) if isinstance(P_orig, ScoreMatrix) else fused
