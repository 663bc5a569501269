"""Independent subspace analysis: a two-layer network with an orthonormal projection
``W`` (m x n) and a fixed contiguous grouping of its outputs.

Each output unit is the l2 norm of one group of projections; training drives the
summed activations (a group-l1 norm of ``W x``) down under ``W W^T = I``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import GeometryError, NumericError

log = logging.getLogger(__name__)


@dataclass
class IsaLayer:
    W: np.ndarray
    group_size: int = 1
    loss_history: list[float] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        m = self.W.shape[0]
        if m % self.group_size:
            raise GeometryError(f"{m} projection rows are not divisible by group size {self.group_size}")

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @property
    def n(self) -> int:
        return self.W.shape[1]

    @property
    def d(self) -> int:
        return self.m // self.group_size


@dataclass(frozen=True)
class TrainOpts:
    learning_rate: float = 0.5
    epochs: int = 100
    batch_size: int = 0  # 0 = full batch
    smooth_eps: float = 1e-8
    seed: int = 0
    min_learning_rate: float = 1e-10

    def __post_init__(self):
        if self.learning_rate <= 0 or self.smooth_eps <= 0:
            raise ValueError("learning_rate and smooth_eps must be positive")


def _group_sq(a: np.ndarray, group_size: int) -> np.ndarray:
    """Sum of squares within contiguous groups along the last axis."""
    if a.shape[-1] % group_size:
        raise GeometryError(f"length {a.shape[-1]} not divisible by group size {group_size}")
    return (a * a).reshape(a.shape[:-1] + (-1, group_size)).sum(axis=-1)


def group_l1_norm(a: np.ndarray, group_size: int) -> float:
    return float(np.sqrt(_group_sq(np.asarray(a, dtype=np.float64), group_size)).sum())


def isa_activation(X: np.ndarray, layer: IsaLayer) -> np.ndarray:
    """Per-group l2 norms of ``W x``; accepts one vector ``(n,)`` or a batch ``(T, n)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != layer.n:
        raise GeometryError(f"input dimension {X.shape[-1]} != layer input {layer.n}")
    return np.sqrt(_group_sq(X @ layer.W.T, layer.group_size))


def isa_loss(batch: np.ndarray, layer: IsaLayer, smooth_eps: float = 1e-8) -> float:
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    if batch.shape[1] != layer.n:
        raise GeometryError(f"input dimension {batch.shape[1]} != layer input {layer.n}")
    return float(np.sqrt(_group_sq(batch @ layer.W.T, layer.group_size) + smooth_eps).sum())


def isa_grad(batch: np.ndarray, layer: IsaLayer, smooth_eps: float = 1e-8) -> np.ndarray:
    """d loss / d W. Row k in group i collects sum_t (W_k . x_t / p_i(x_t)) x_t."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    if batch.shape[1] != layer.n:
        raise GeometryError(f"input dimension {batch.shape[1]} != layer input {layer.n}")
    proj = batch @ layer.W.T  # (T, m)
    p = np.sqrt(_group_sq(proj, layer.group_size) + smooth_eps)  # (T, d)
    coef = proj / np.repeat(p, layer.group_size, axis=1)
    return coef.T @ batch


def symmetric_orthonormalize(W: np.ndarray) -> np.ndarray:
    """(W W^T)^(-1/2) W, the orthonormal matrix closest to ``W``."""
    W = np.asarray(W, dtype=np.float64)
    if not np.all(np.isfinite(W)):
        raise NumericError("projection matrix contains non-finite values")
    vals, vecs = np.linalg.eigh(W @ W.T)
    if vals.min() <= 1e-12 * max(vals.max(), 1.0):
        raise NumericError("projection matrix is rank deficient; cannot orthonormalize")
    return (vecs * (1.0 / np.sqrt(vals))) @ vecs.T @ W


def random_orthonormal(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, m)))
    q *= np.sign(np.diag(r))
    return q.T


def train_isa(data: np.ndarray, group_size: int, opts: TrainOpts = TrainOpts(),
              m: int | None = None, on_epoch: Callable[[int, IsaLayer, float], None] | None = None) -> IsaLayer:
    """Projected gradient descent on the group-sparsity loss.

    Each epoch takes a step on the mean loss, re-orthonormalizes, and halves the
    learning rate until the loss does not increase; ``loss_history`` of the
    returned layer is therefore non-increasing. ``on_epoch(epoch, layer, loss)``
    is called after every accepted step.
    """
    data = np.asarray(data, dtype=np.float64)
    T, n = data.shape
    m = n if m is None else m
    if m > n:
        raise GeometryError(f"ISA needs m <= n, got m={m}, n={n}")
    rng = np.random.default_rng(opts.seed)
    layer = IsaLayer(random_orthonormal(m, n, rng), group_size)
    loss = isa_loss(data, layer, opts.smooth_eps)
    if not np.isfinite(loss):
        raise NumericError("ISA loss is non-finite at initialization; check the input data")
    history = [loss]
    lr = opts.learning_rate
    for epoch in range(opts.epochs):
        if opts.batch_size and opts.batch_size < T:
            idx = rng.choice(T, opts.batch_size, replace=False)
            grad = isa_grad(data[idx], layer, opts.smooth_eps) / opts.batch_size
        else:
            grad = isa_grad(data, layer, opts.smooth_eps) / T
        while lr >= opts.min_learning_rate:
            candidate = IsaLayer(symmetric_orthonormalize(layer.W - lr * grad), group_size)
            new_loss = isa_loss(data, candidate, opts.smooth_eps)
            if not np.isfinite(new_loss):
                raise NumericError(f"ISA loss became non-finite at epoch {epoch} (lr={lr:g})")
            if new_loss <= loss:
                layer, loss = candidate, new_loss
                break
            lr *= 0.5
        else:
            log.debug("ISA step size underflow at epoch %d; stopping", epoch)
            break
        history.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, layer, loss)
    layer.loss_history = history
    return layer
