"""Linear SVMs (dual coordinate descent), one-vs-all scoring, and MAcc / MAP evaluation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import TensorFile
from .errors import DataError, GeometryError


@dataclass
class LinearModel:
    w: np.ndarray
    b: float
    duality_gap: float = 0.0
    epochs: int = 0

    def decision(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + self.b


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (N, K)
    class_names: list[str]
    instance_ids: list[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        N, K = self.scores.shape
        if N < 1 or K < 1:
            raise DataError("score matrix must have at least one row and one column")
        if len(self.class_names) != K or len(self.instance_ids) != N:
            raise GeometryError("class names / instance ids do not match the score matrix shape")
        if not np.all(np.isfinite(self.scores)):
            raise DataError("score matrix contains non-finite values")

    def with_scores(self, scores: np.ndarray) -> "ScoreMatrix":
        return ScoreMatrix(scores, list(self.class_names), list(self.instance_ids))


def _objectives(Xb: np.ndarray, y: np.ndarray, alpha: np.ndarray, w: np.ndarray, C: float) -> tuple[float, float]:
    margins = 1.0 - y * (Xb @ w)
    primal = 0.5 * w @ w + C * np.maximum(margins, 0.0).sum()
    dual = alpha.sum() - 0.5 * w @ w
    return primal, dual


def svm_train(X: np.ndarray, y: np.ndarray, C: float = 100.0, tol: float = 1e-3,
              max_epochs: int = 1000, seed: int = 0) -> LinearModel:
    """L1-loss linear SVM by dual coordinate descent.

    The bias is learned as the weight of a constant feature (so it is lightly
    regularized). Iterates until the duality gap falls below ``tol * C * N``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if set(np.unique(y)) != {-1.0, 1.0}:
        raise DataError("svm_train needs labels from both classes -1 and +1")
    N = len(X)
    Xb = np.hstack([X, np.ones((N, 1))])
    qii = (Xb * Xb).sum(axis=1)
    alpha = np.zeros(N)
    w = np.zeros(Xb.shape[1])
    rng = np.random.default_rng(seed)
    gap_tol = tol * C * N
    gap = np.inf
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        for i in rng.permutation(N):
            if qii[i] == 0.0:
                continue
            g = y[i] * (Xb[i] @ w) - 1.0
            new = min(max(alpha[i] - g / qii[i], 0.0), C)
            delta = new - alpha[i]
            if delta != 0.0:
                alpha[i] = new
                w += delta * y[i] * Xb[i]
        primal, dual = _objectives(Xb, y, alpha, w, C)
        gap = primal - dual
        if gap <= gap_tol:
            break
    return LinearModel(w[:-1].copy(), float(w[-1]), float(gap), epoch)


def ova_train(X: np.ndarray, labels: Sequence[int], num_classes: int | None = None,
              C: float = 100.0, seed: int = 0) -> list[LinearModel]:
    labels = np.asarray(labels)
    K = int(labels.max()) + 1 if num_classes is None else num_classes
    if K < 2:
        raise DataError("one-vs-all needs at least two classes")
    counts = np.bincount(labels, minlength=K)
    if (counts == 0).any():
        raise DataError(f"classes {np.flatnonzero(counts == 0).tolist()} have no training examples")
    return [svm_train(X, np.where(labels == k, 1.0, -1.0), C, seed=seed + k) for k in range(K)]


def ova_predict(models: list[LinearModel], X: np.ndarray, class_names: list[str] | None = None,
                instance_ids: list[str] | None = None) -> ScoreMatrix:
    scores = np.column_stack([m.decision(X) for m in models])
    names = class_names or [str(k) for k in range(len(models))]
    ids = instance_ids or [str(i) for i in range(len(scores))]
    return ScoreMatrix(scores, list(names), list(ids))


def models_to_tensors(models: list[LinearModel], class_names: list[str]) -> tuple[dict, dict]:
    W = np.stack([m.w for m in models])
    b = np.array([m.b for m in models])
    return {"W": W, "b": b}, {"kind": "ova_svm", "class_names": list(class_names)}


def models_from_tensors(tf: TensorFile) -> tuple[list[LinearModel], list[str]]:
    if tf.meta.get("kind") != "ova_svm":
        raise DataError("container does not hold one-vs-all SVM models")
    W, b = np.asarray(tf["W"], np.float64), np.asarray(tf["b"], np.float64)
    return [LinearModel(W[k], float(b[k])) for k in range(len(b))], tf.meta["class_names"]


def _scores(s: ScoreMatrix | np.ndarray) -> np.ndarray:
    return s.scores if isinstance(s, ScoreMatrix) else np.asarray(s, dtype=np.float64)


def predict_labels(scores: ScoreMatrix | np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(_scores(scores), axis=1)


def eval_macc(scores: ScoreMatrix | np.ndarray, truth: Sequence[int]) -> float:
    """Mean over classes of per-class accuracy (recall of the row argmax)."""
    P = _scores(scores)
    truth = np.asarray(truth)
    K = P.shape[1]
    if len(truth) != len(P):
        raise GeometryError("truth does not cover every instance")
    pred = predict_labels(P)
    accs = []
    for k in range(K):
        members = truth == k
        if not members.any():
            raise DataError(f"class {k} has no instances in the ground truth")
        accs.append(float((pred[members] == k).mean()))
    return float(np.mean(accs))


def average_precision(column: np.ndarray, positives: np.ndarray) -> float:
    """Precision averaged over each positive's rank; ties resolved by instance order."""
    order = np.argsort(-np.asarray(column, dtype=np.float64), kind="stable")
    hits = np.asarray(positives, dtype=bool)[order]
    if not hits.any():
        raise DataError("average precision of a class without positives is undefined")
    ranks = np.flatnonzero(hits) + 1
    return float((np.arange(1, len(ranks) + 1) / ranks).mean())


def _truth_matrix(truth, N: int, K: int) -> np.ndarray:
    t = np.asarray(truth)
    if t.ndim == 2:
        if t.shape != (N, K):
            raise GeometryError(f"truth matrix shape {t.shape} != ({N}, {K})")
        return t.astype(bool)
    if len(t) != N:
        raise GeometryError("truth does not cover every instance")
    out = np.zeros((N, K), dtype=bool)
    out[np.arange(N), t] = True
    return out


def eval_map(scores: ScoreMatrix | np.ndarray, truth) -> float:
    """Mean average precision over classes. ``truth`` is a label vector or an (N, K)
    boolean matrix for multi-label data."""
    P = _scores(scores)
    T = _truth_matrix(truth, *P.shape)
    for k in range(P.shape[1]):
        if not T[:, k].any():
            raise DataError(f"class {k} has no instances in the ground truth")
    return float(np.mean([average_precision(P[:, k], T[:, k]) for k in range(P.shape[1])]))


def write_scores_csv(sm: ScoreMatrix, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", *sm.class_names])
        for iid, row in zip(sm.instance_ids, sm.scores):
            w.writerow([iid, *(repr(float(v)) for v in row)])


def read_scores_csv(path: str | Path) -> ScoreMatrix:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"score file not found: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise DataError(f"{path}: needs a header and at least one row")
    header = rows[0]
    names = header[1:] if header and header[0] == "instance_id" else header
    try:
        ids = [r[0] for r in rows[1:]]
        scores = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric score: {exc}") from exc
    if scores.ndim != 2 or scores.shape[1] != len(names):
        raise DataError(f"{path}: rows do not have one score per class")
    return ScoreMatrix(scores, names, ids)
