"""Stacked convolutional ISA over trajectory-aligned volumes, one model per stream.

Layer 1 learns PCA-whitening + ISA on small sub-volumes (the receptive field);
it is then applied convolutionally at every stride position of the full volume.
Layer 2 whitens the concatenated responses, runs a grouped ISA, and the final
descriptor stacks the leading whitened components with the ISA outputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .container import TensorFile
from .errors import DataError, GeometryError
from .isa import IsaLayer, TrainOpts, isa_activation, train_isa

log = logging.getLogger(__name__)

VOLUME = (32, 15)  # (spatial side, frames)
CHUNK = 256


@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray  # (k, n), rows are principal directions, leading first
    scales: np.ndarray  # (k,), 1/sqrt(eigenvalue + reg)
    whiten: bool = True

    @property
    def n(self) -> int:
        return self.basis.shape[1]

    @property
    def k(self) -> int:
        return self.basis.shape[0]


def pca_train(X: np.ndarray, dim: int, whiten: bool = True) -> PcaModel:
    X = np.asarray(X, dtype=np.float64)
    T, n = X.shape
    if T <= dim:
        raise DataError(f"PCA to {dim} dimensions needs more than {dim} samples, got {T}")
    if dim > n:
        raise GeometryError(f"PCA dimension {dim} exceeds input dimension {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    trace = float((Xc * Xc).sum()) / (T - 1)
    if trace <= 1e-20:
        raise DataError("PCA input has zero variance")
    if T < n:  # fewer samples than dimensions: the thin SVD of the data is far cheaper
        _, sv, Vt = scipy.linalg.svd(Xc, full_matrices=False)
        vals, vecs = sv[:dim] ** 2 / (T - 1), Vt[:dim].T
    else:
        vals, vecs = scipy.linalg.eigh(Xc.T @ Xc / (T - 1), subset_by_index=[n - dim, n - 1])
        vals, vecs = vals[::-1], vecs[:, ::-1]
    # fix the sign so the largest-magnitude entry of each direction is positive
    flip = np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(dim)])
    vecs = vecs * np.where(flip == 0, 1.0, flip)
    reg = 1e-5 * trace / n
    scales = 1.0 / np.sqrt(np.maximum(vals, 0.0) + reg)
    return PcaModel(mean, vecs.T.copy(), scales, whiten)


def pca_apply(model: PcaModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.n:
        raise GeometryError(f"PCA expects {model.n}-dimensional input, got {X.shape[-1]}")
    Y = (X - model.mean) @ model.basis.T
    return Y * model.scales if model.whiten else Y


def pca_invert(model: PcaModel, Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if model.whiten:
        Y = Y / model.scales
    return Y @ model.basis + model.mean


@dataclass(frozen=True)
class Geometry:
    """Receptive field and stride as (spatial px, frames) over a 32x32x15 volume."""

    rf: tuple[int, int] = (16, 5)
    stride: tuple[int, int] = (16, 5)
    channels: int = 1
    volume: tuple[int, int] = VOLUME

    def __post_init__(self):
        (rs, rt), (ss, st), (vs, vt) = self.rf, self.stride, self.volume
        problems = []
        if not (0 < rs <= vs and 0 < rt <= vt):
            problems.append(f"receptive field {self.rf} must fit inside volume {self.volume}")
        elif ss <= 0 or st <= 0:
            problems.append("strides must be positive")
        else:
            if (vs - rs) % ss:
                problems.append(f"(volume_s - rf_s) % stride_s = ({vs} - {rs}) % {ss} = {(vs - rs) % ss} != 0")
            if (vt - rt) % st:
                problems.append(f"(volume_t - rf_t) % stride_t = ({vt} - {rt}) % {st} = {(vt - rt) % st} != 0")
        if problems:
            raise GeometryError("geometry does not tile the volume: " + "; ".join(problems))

    @property
    def positions_per_axis(self) -> tuple[int, int, int]:
        (rs, rt), (ss, st), (vs, vt) = self.rf, self.stride, self.volume
        n_s = (vs - rs) // ss + 1
        return n_s, n_s, (vt - rt) // st + 1

    @property
    def num_positions(self) -> int:
        nx, ny, nt = self.positions_per_axis
        return nx * ny * nt

    @property
    def input_dim(self) -> int:
        return self.rf[0] * self.rf[0] * self.rf[1] * self.channels

    def offsets(self) -> list[tuple[int, int, int]]:
        """(t0, y0, x0) of every convolution position, x varying fastest."""
        nx, ny, nt = self.positions_per_axis
        ss, st = self.stride
        return [(t * st, y * ss, x * ss) for t in range(nt) for y in range(ny) for x in range(nx)]


def covering_stride(rf: tuple[int, int], volume: tuple[int, int] = VOLUME) -> tuple[int, int]:
    """Largest (spatial, temporal) stride no bigger than ``rf`` that tiles ``volume`` exactly."""
    def axis(r, v):
        return max(s for s in range(1, r + 1) if (v - r) % s == 0)
    return axis(rf[0], volume[0]), axis(rf[1], volume[1])


@dataclass(frozen=True)
class ConvIsaConfig:
    rf: tuple[int, int] = (16, 5)
    stride: tuple[int, int] = (16, 5)
    pca1_dim: int = 300
    group1: int = 1
    pca2_dim: int = 200
    group2: int = 2
    stack_top: int = 100
    sample_count: int = 200_000
    isa: TrainOpts = field(default_factory=TrainOpts)

    def geometry(self, channels: int) -> Geometry:
        return Geometry(tuple(self.rf), tuple(self.stride), channels)

    def check(self, channels: int = 1) -> None:
        """Raise GeometryError naming the first broken link of the dimension chain."""
        g = self.geometry(channels)
        if self.pca1_dim > g.input_dim:
            raise GeometryError(f"pca1_dim <= rf_s^2 * rf_t * channels violated: {self.pca1_dim} > {g.input_dim}")
        if self.pca1_dim % self.group1:
            raise GeometryError(f"pca1_dim % group1 == 0 violated: {self.pca1_dim} % {self.group1}")
        layer2_in = g.num_positions * (self.pca1_dim // self.group1)
        if self.pca2_dim > layer2_in:
            raise GeometryError(f"pca2_dim <= positions * d1 violated: {self.pca2_dim} > "
                                f"{g.num_positions} * {self.pca1_dim // self.group1} = {layer2_in}")
        if self.pca2_dim % self.group2:
            raise GeometryError(f"pca2_dim % group2 == 0 violated: {self.pca2_dim} % {self.group2}")
        if self.stack_top > self.pca2_dim:
            raise GeometryError(f"stack_top <= pca2_dim violated: {self.stack_top} > {self.pca2_dim}")

    @property
    def output_dim(self) -> int:
        return self.stack_top + self.pca2_dim // self.group2


def _as_channels(volumes: np.ndarray) -> np.ndarray:
    """Normalize to ``(N, L, H, W, C)``."""
    volumes = np.asarray(volumes)
    return volumes[..., None] if volumes.ndim == 4 else volumes


def _check_volumes(volumes: np.ndarray, geom: Geometry) -> None:
    vs, vt = geom.volume
    if volumes.ndim != 5 or volumes.shape[1:] != (vt, vs, vs, geom.channels):
        raise GeometryError(f"volumes of shape {volumes.shape[1:]} do not match model geometry "
                            f"({vt}, {vs}, {vs}, {geom.channels})")


def _batch(volumes: np.ndarray, geom: Geometry) -> tuple[np.ndarray, bool]:
    arr = np.asarray(volumes)
    single = arr.ndim == (3 if geom.channels == 1 else 4)
    v = _as_channels(arr[None] if single else arr)
    _check_volumes(v, geom)
    return v, single


def subvolumes(volumes: np.ndarray, geom: Geometry) -> np.ndarray:
    """All receptive-field crops, ``(N, P, n1)``; each crop flattened with channel
    fastest, then x, y, t."""
    v = _as_channels(volumes)
    _check_volumes(v, geom)
    rs, rt = geom.rf
    crops = [v[:, t:t + rt, y:y + rs, x:x + rs].reshape(len(v), -1) for t, y, x in geom.offsets()]
    return np.stack(crops, axis=1)


def convolve_layer1(volumes: np.ndarray, pca1: PcaModel, isa1: IsaLayer, geom: Geometry) -> np.ndarray:
    """Layer-1 responses at every convolution position, ``(N, P * d1)``, position-major."""
    v, single = _batch(volumes, geom)
    out = []
    for i in range(0, len(v), CHUNK):
        sub = subvolumes(v[i:i + CHUNK], geom)
        n, P, d = sub.shape
        act = isa_activation(pca_apply(pca1, sub.reshape(n * P, d)), isa1)
        out.append(act.reshape(n, -1))
    if not out:
        return np.zeros((0, geom.num_positions * isa1.d))
    res = np.concatenate(out)
    return res[0] if single else res


@dataclass
class StackedModel:
    stream: str  # "pixel" or "flow"
    geometry: Geometry
    pca1: PcaModel
    isa1: IsaLayer
    pca2: PcaModel
    isa2: IsaLayer
    stack_top: int = 100

    @property
    def output_dim(self) -> int:
        return self.stack_top + self.isa2.d

    def to_tensors(self, prefix: str = "") -> tuple[dict[str, np.ndarray], dict]:
        t = {}
        for name, pca in (("pca1", self.pca1), ("pca2", self.pca2)):
            t[f"{prefix}{name}.mean"] = pca.mean
            t[f"{prefix}{name}.basis"] = pca.basis
            t[f"{prefix}{name}.scales"] = pca.scales
        t[f"{prefix}isa1.W"] = self.isa1.W
        t[f"{prefix}isa2.W"] = self.isa2.W
        meta = {"stream": self.stream, "rf": list(self.geometry.rf), "stride": list(self.geometry.stride),
                "channels": self.geometry.channels, "volume": list(self.geometry.volume),
                "group1": self.isa1.group_size, "group2": self.isa2.group_size,
                "stack_top": self.stack_top, "whiten": [self.pca1.whiten, self.pca2.whiten]}
        return t, meta

    @classmethod
    def from_tensors(cls, tf: TensorFile | dict, meta: dict, prefix: str = "") -> "StackedModel":
        get = (lambda k: np.asarray(tf[k], dtype=np.float64))
        geom = Geometry(tuple(meta["rf"]), tuple(meta["stride"]), meta["channels"], tuple(meta["volume"]))
        w1, w2 = meta.get("whiten", [True, True])
        pca1 = PcaModel(get(f"{prefix}pca1.mean"), get(f"{prefix}pca1.basis"), get(f"{prefix}pca1.scales"), w1)
        pca2 = PcaModel(get(f"{prefix}pca2.mean"), get(f"{prefix}pca2.basis"), get(f"{prefix}pca2.scales"), w2)
        return cls(meta["stream"], geom, pca1, IsaLayer(get(f"{prefix}isa1.W"), meta["group1"]),
                   pca2, IsaLayer(get(f"{prefix}isa2.W"), meta["group2"]), meta["stack_top"])


def train_stacked(volumes: np.ndarray, cfg: ConvIsaConfig = ConvIsaConfig(), seed: int = 0,
                  stream: str | None = None) -> StackedModel:
    """Greedy layer-wise training on a batch of volumes (gray ``(N,15,32,32)`` or
    flow ``(N,15,32,32,2)``); at most ``cfg.sample_count`` volumes are used."""
    v = _as_channels(volumes)
    channels = v.shape[-1]
    stream = stream or ("pixel" if channels == 1 else "flow")
    geom = cfg.geometry(channels)
    _check_volumes(v, geom)
    cfg.check(channels)
    rng = np.random.default_rng(seed)
    if len(v) > cfg.sample_count:
        v = v[np.sort(rng.choice(len(v), cfg.sample_count, replace=False))]
    T = len(v)
    if T <= max(cfg.pca1_dim, cfg.pca2_dim):
        raise DataError(f"{T} training volumes; need more than {max(cfg.pca1_dim, cfg.pca2_dim)}")

    rs, rt = geom.rf
    vs, vt = geom.volume
    ts = rng.integers(0, vt - rt + 1, T)
    ys = rng.integers(0, vs - rs + 1, T)
    xs = rng.integers(0, vs - rs + 1, T)
    sub = np.stack([v[i, t:t + rt, y:y + rs, x:x + rs].reshape(-1) for i, t, y, x in zip(range(T), ts, ys, xs)])
    isa_seeds = rng.integers(0, 2**31 - 1, 2)

    log.info("%s stream: layer 1 PCA %d -> %d on %d sub-volumes", stream, sub.shape[1], cfg.pca1_dim, T)
    pca1 = pca_train(sub, cfg.pca1_dim)
    isa1 = train_isa(pca_apply(pca1, sub), cfg.group1, replace(cfg.isa, seed=int(isa_seeds[0])))
    del sub

    layer1 = convolve_layer1(v, pca1, isa1, geom)
    log.info("%s stream: layer 2 PCA %d -> %d", stream, layer1.shape[1], cfg.pca2_dim)
    pca2 = pca_train(layer1, cfg.pca2_dim)
    isa2 = train_isa(pca_apply(pca2, layer1), cfg.group2, replace(cfg.isa, seed=int(isa_seeds[1])))
    return StackedModel(stream, geom, pca1, isa1, pca2, isa2, cfg.stack_top)


def apply_stacked(model: StackedModel, volumes: np.ndarray) -> np.ndarray:
    """Descriptors ``[leading whitened layer-2 components ; layer-2 ISA outputs]``.

    Accepts a single volume or a batch; returns ``(output_dim,)`` or ``(N, output_dim)``.
    """
    v, single = _batch(volumes, model.geometry)
    layer1 = convolve_layer1(v, model.pca1, model.isa1, model.geometry)
    x2 = pca_apply(model.pca2, layer1)
    out = np.hstack([x2[:, :model.stack_top], isa_activation(x2, model.isa2)])
    return out[0] if single else out


@dataclass
class TwoStreamModel:
    pixel_model: StackedModel
    flow_model: StackedModel

    def describe(self, pixel_volumes: np.ndarray, flow_volumes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(LOP, LOF) descriptors for matching batches of gray and flow volumes."""
        return apply_stacked(self.pixel_model, pixel_volumes), apply_stacked(self.flow_model, flow_volumes)

    def to_tensors(self) -> tuple[dict[str, np.ndarray], dict]:
        tp, mp = self.pixel_model.to_tensors("pixel.")
        tf, mf = self.flow_model.to_tensors("flow.")
        return {**tp, **tf}, {"kind": "two_stream_convisa", "pixel": mp, "flow": mf}

    @classmethod
    def from_tensors(cls, tf: TensorFile) -> "TwoStreamModel":
        if tf.meta.get("kind") != "two_stream_convisa":
            raise DataError("container does not hold a two-stream ConvISA model")
        return cls(StackedModel.from_tensors(tf, tf.meta["pixel"], "pixel."),
                   StackedModel.from_tensors(tf, tf.meta["flow"], "flow."))


def train_two_stream(pixel_volumes: np.ndarray, flow_volumes: np.ndarray,
                     cfg: ConvIsaConfig = ConvIsaConfig(), seed: int = 0) -> TwoStreamModel:
    seeds = np.random.SeedSequence(seed).generate_state(2)
    return TwoStreamModel(train_stacked(pixel_volumes, cfg, int(seeds[0]), "pixel"),
                          train_stacked(flow_volumes, cfg, int(seeds[1]), "flow"))


def layer1_filters(model: StackedModel) -> np.ndarray:
    """Layer-1 filters mapped back to input space, ``(d1, rf_t, rf_s, rf_s, channels)``."""
    pca = model.pca1
    proj = model.isa1.W @ ((pca.scales[:, None] if pca.whiten else 1.0) * pca.basis)
    rs, rt = model.geometry.rf
    return proj.reshape(-1, rt, rs, rs, model.geometry.channels)


def filter_grid(filters: np.ndarray, count: int = 16, pad: int = 1) -> np.ndarray:
    """Tile the first ``count`` filters into one image in [0, 1]: one row per filter,
    frames left to right, flow channels stacked vertically."""
    f = filters[:count]
    n, rt, rs, _, c = f.shape
    tile_h, tile_w = c * (rs + pad), rt * (rs + pad)
    img = np.zeros((n * tile_h, tile_w))
    for i in range(n):
        lo, hi = f[i].min(), f[i].max()
        norm = (f[i] - lo) / (hi - lo) if hi > lo else np.zeros_like(f[i])
        for ch in range(c):
            for t in range(rt):
                y0, x0 = i * tile_h + ch * (rs + pad), t * (rs + pad)
                img[y0:y0 + rs, x0:x0 + rs] = norm[t, :, :, ch]
    return img

