"""Fisher-vector video encoding: per-kind descriptor PCA, diagonal GMM, and normalization."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .container import TensorFile
from .convisa import PcaModel, pca_apply, pca_train
from .descriptors import KINDS, DescriptorSet
from .errors import DataError, GeometryError, NumericError
from .video_io import GrayVideo

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    log_likelihoods: list[float] = field(default_factory=list, repr=False, compare=False)

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def D(self) -> int:
        return self.means.shape[1]


def _log_joint(X: np.ndarray, gmm: GmmModel) -> np.ndarray:
    """log w_k + log N(x | mu_k, diag var_k), shape (M, K)."""
    inv = 1.0 / gmm.variances
    quad = (X * X) @ inv.T - 2.0 * X @ (gmm.means * inv).T + (gmm.means ** 2 * inv).sum(axis=1)
    log_det = np.log(gmm.variances).sum(axis=1)
    return np.log(gmm.weights) - 0.5 * (gmm.D * LOG_2PI + log_det + quad)


def posteriors(X: np.ndarray, gmm: GmmModel) -> tuple[np.ndarray, np.ndarray]:
    """Responsibilities (M, K) and per-sample log-likelihood (M,), computed in log space."""
    lj = _log_joint(X, gmm)
    ll = logsumexp(lj, axis=1)
    return np.exp(lj - ll[:, None]), ll


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def gmm_train(samples: np.ndarray, K: int, seed: int = 0, max_iter: int = 200,
              tol: float = 1e-5, floor_ratio: float = 1e-4) -> GmmModel:
    """k-means++ seeding followed by EM on a diagonal-covariance mixture.

    Stops when the mean log-likelihood gains less than ``tol``. A component whose
    responsibility mass vanishes is re-seeded once on the worst-explained sample;
    a second collapse raises.
    """
    X = np.asarray(samples, dtype=np.float64)
    S, D = X.shape
    if S < 10 * K:
        raise DataError(f"GMM with {K} components needs at least {10 * K} samples, got {S}")
    rng = np.random.default_rng(seed)
    data_var = X.var(axis=0)
    floor = np.maximum(floor_ratio * data_var, 1e-12)
    gmm = GmmModel(np.full(K, 1.0 / K), _kmeans_pp(X, K, rng), np.tile(np.maximum(data_var, floor), (K, 1)))
    reseeded = np.zeros(K, dtype=bool)
    history: list[float] = []
    for it in range(max_iter):
        gamma, ll = posteriors(X, gmm)
        history.append(float(ll.mean()))
        if not np.isfinite(history[-1]):
            raise NumericError(f"GMM log-likelihood became non-finite at iteration {it}")
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        nk = gamma.sum(axis=0)
        means = (gamma.T @ X) / np.maximum(nk, 1e-300)[:, None]
        var = (gamma.T @ (X * X)) / np.maximum(nk, 1e-300)[:, None] - means ** 2
        weights = nk / S
        dead = nk < 1e-8 * S
        if dead.any():
            if (dead & reseeded).any():
                raise NumericError(f"GMM component(s) {np.flatnonzero(dead & reseeded).tolist()} collapsed twice")
            worst = np.argsort(ll)[: int(dead.sum())]
            means[dead] = X[worst]
            var[dead] = data_var
            weights[dead] = 1.0 / S
            weights /= weights.sum()
            reseeded |= dead
            log.warning("re-seeded collapsed GMM component(s) %s", np.flatnonzero(dead).tolist())
        gmm = GmmModel(weights, means, np.maximum(var, floor))
    gmm.log_likelihoods = history
    return gmm


def fisher_vector(descs: np.ndarray, gmm: GmmModel) -> np.ndarray:
    """Mean and variance gradients, ``[G_mu(1..K) ; G_sigma(1..K)]``, length 2*D*K.

    An empty descriptor set maps to the zero vector.
    """
    X = np.asarray(descs, dtype=np.float64)
    if X.size == 0:
        return np.zeros(2 * gmm.D * gmm.K)
    if X.ndim != 2 or X.shape[1] != gmm.D:
        raise GeometryError(f"descriptors of shape {X.shape} do not match GMM dimension {gmm.D}")
    M = len(X)
    gamma, _ = posteriors(X, gmm)
    s0 = gamma.sum(axis=0)[:, None]
    s1 = gamma.T @ X
    s2 = gamma.T @ (X * X)
    mu, var = gmm.means, gmm.variances
    sigma = np.sqrt(var)
    w = gmm.weights[:, None]
    g_mu = (s1 - s0 * mu) / sigma / (M * np.sqrt(w))
    g_sig = ((s2 - 2.0 * mu * s1 + s0 * mu * mu) / var - s0) / (M * np.sqrt(2.0 * w))
    return np.concatenate([g_mu.ravel(), g_sig.ravel()])


def power_l2_normalize(v: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    p = np.sign(v) * np.abs(v) ** alpha
    peak = np.abs(p).max(initial=0.0)
    if peak == 0:
        return p
    p = p / peak  # rescale first so tiny inputs do not underflow in the norm
    return p / np.linalg.norm(p)


@dataclass
class VideoRepresentation:
    vector: np.ndarray
    blocks: dict[str, slice]

    def block(self, kind: str) -> np.ndarray:
        return self.vector[self.blocks[kind]]


@dataclass
class FisherEncoder:
    kinds: list[str]
    pcas: dict[str, PcaModel]
    gmms: dict[str, GmmModel]
    xyt: bool = False
    power_alpha: float = 0.5

    def block_dims(self) -> dict[str, int]:
        return {k: 2 * self.gmms[k].D * self.gmms[k].K for k in self.kinds}

    @property
    def dim(self) -> int:
        return sum(self.block_dims().values())

    def project(self, kind: str, values: np.ndarray, locations: np.ndarray) -> np.ndarray:
        if len(values) == 0:
            return np.zeros((0, self.gmms[kind].D))
        out = pca_apply(self.pcas[kind], values)
        if self.xyt:
            out = np.hstack([out, np.clip(locations, 0.0, 1.0)])
        return out

    def to_tensors(self) -> tuple[dict[str, np.ndarray], dict]:
        t = {}
        for k in self.kinds:
            p, g = self.pcas[k], self.gmms[k]
            t.update({f"{k}.pca.mean": p.mean, f"{k}.pca.basis": p.basis, f"{k}.pca.scales": p.scales,
                      f"{k}.gmm.weights": g.weights, f"{k}.gmm.means": g.means, f"{k}.gmm.variances": g.variances})
        return t, {"kind": "fisher_encoder", "kinds": list(self.kinds), "xyt": self.xyt,
                   "power_alpha": self.power_alpha}

    @classmethod
    def from_tensors(cls, tf: TensorFile) -> "FisherEncoder":
        if tf.meta.get("kind") != "fisher_encoder":
            raise DataError("container does not hold a Fisher encoder")
        get = (lambda name: np.asarray(tf[name], dtype=np.float64))
        kinds = tf.meta["kinds"]
        pcas = {k: PcaModel(get(f"{k}.pca.mean"), get(f"{k}.pca.basis"), get(f"{k}.pca.scales"), False)
                for k in kinds}
        gmms = {k: GmmModel(get(f"{k}.gmm.weights"), get(f"{k}.gmm.means"), get(f"{k}.gmm.variances"))
                for k in kinds}
        return cls(kinds, pcas, gmms, tf.meta["xyt"], tf.meta["power_alpha"])


def train_encoder(pool: DescriptorSet, K: int = 256, seed: int = 0, sample_size: int = 256_000,
                  kinds: list[str] | None = None, xyt: bool = False, power_alpha: float = 0.5) -> FisherEncoder:
    """Fit, per kind, a PCA halving the dimension and a GMM on a random sample of ``pool``."""
    kinds = [k for k in KINDS if k in (kinds or pool.kinds)]
    missing = [k for k in kinds if k not in pool.values]
    if missing:
        raise DataError(f"descriptor pool lacks kinds {missing}")
    rng = np.random.default_rng(seed)
    idx = np.arange(len(pool))
    if len(pool) > sample_size:
        idx = np.sort(rng.choice(len(pool), sample_size, replace=False))
    sample = pool.take(idx)
    gmm_seeds = rng.integers(0, 2**31 - 1, len(kinds))
    pcas, gmms = {}, {}
    for kind, gseed in zip(kinds, gmm_seeds):
        values = sample.values[kind]
        pcas[kind] = pca_train(values, math.ceil(values.shape[1] / 2), whiten=False)
        enc = FisherEncoder([kind], pcas, {}, xyt)
        log.info("GMM for %s: %d samples, K=%d", kind, len(values), K)
        gmms[kind] = gmm_train(enc.project(kind, values, sample.locations), K, int(gseed))
    return FisherEncoder(kinds, pcas, gmms, xyt, power_alpha)


def encode_video(descriptors: DescriptorSet, encoder: FisherEncoder) -> VideoRepresentation:
    """PCA -> Fisher vector -> power + l2 normalization per kind, concatenated in canonical order."""
    unknown = [k for k in descriptors.kinds if k not in encoder.kinds]
    if unknown:
        raise DataError(f"encoder was not trained for kinds {unknown}")
    blocks, parts, pos = {}, [], 0
    for kind in encoder.kinds:
        values = descriptors.values.get(kind)
        if values is None:
            raise DataError(f"descriptor set has no {kind!r} descriptors")
        if len(values) and values.shape[1] != encoder.pcas[kind].n:
            raise GeometryError(f"{kind}: dimension {values.shape[1]} != encoder input {encoder.pcas[kind].n}")
        fv = fisher_vector(encoder.project(kind, values, descriptors.locations), encoder.gmms[kind])
        parts.append(power_l2_normalize(fv, encoder.power_alpha))
        blocks[kind] = slice(pos, pos + fv.size)
        pos += fv.size
    return VideoRepresentation(np.concatenate(parts), blocks)


def required_frames(skip: int, length: int = 15) -> int:
    return (length + 1) * (skip + 1)


def mifs_stack(video: GrayVideo, skips=(0, 1, 2), extractor: Callable[[GrayVideo], DescriptorSet] = None,
               length: int = 15) -> tuple[DescriptorSet, dict]:
    """Pool descriptors extracted at several frame-skip rates.

    Skip level ``s`` keeps every (s+1)-th frame. Levels for which the video is too
    short are left out and listed under ``report["skipped"]``. The extractor may
    return any type with ``__len__`` and a ``concat`` classmethod.
    """
    if extractor is None:
        raise ValueError("mifs_stack needs a descriptor extractor")
    sets, report = [], {"used": [], "skipped": [], "counts": {}}
    for s in sorted(set(skips)):
        if video.frames < required_frames(s, length):
            report["skipped"].append(s)
            continue
        ds = extractor(video.subsample(s + 1))
        report["used"].append(s)
        report["counts"][s] = len(ds)
        sets.append(ds)
    if not sets:
        return DescriptorSet.empty(), report
    return type(sets[0]).concat(sets), report
