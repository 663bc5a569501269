"""HOG / HOF / MBH histograms over trajectory-aligned volumes, plus post-processing.

Volumes are batches: gray ``(N, L, H, W)`` and flow ``(N, L, H, W, 2)``. Each
volume is split into a ``2 x 2 x 3`` (x, y, t) grid of cells; histograms are
concatenated cell-major with the x-cell varying fastest, then y, then t.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("traj_shape", "hog", "hof", "mbh", "lop", "lof")
HISTOGRAM_KINDS = ("hog", "hof", "mbh")
DIMS = {"traj_shape": 28, "hog": 96, "hof": 108, "mbh": 192, "lop": 200, "lof": 200}

ORIENT_BINS = 8
GRID = (2, 2, 3)  # cells along x, y, t


@dataclass(frozen=True)
class Descriptor:
    kind: str
    values: np.ndarray
    location: tuple[float, float, float]  # (x, y, t) at level-0 coordinates


def l2_normalize(v: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return np.where(n > eps, v / np.where(n > eps, n, 1.0), 0.0)


def _spatial_gradients(vols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences along x and y (one-sided at the patch edge)."""
    gy, gx = np.gradient(vols, axis=(-2, -1))
    return gx, gy


def _cell_index(L: int, H: int, W: int, grid=GRID) -> np.ndarray:
    nx, ny, nt = grid
    t = np.arange(L) * nt // L
    y = np.arange(H) * ny // H
    x = np.arange(W) * nx // W
    return (t[:, None, None] * ny + y[None, :, None]) * nx + x[None, None, :]


def _soft_orientation(gx: np.ndarray, gy: np.ndarray, nbins: int = ORIENT_BINS):
    """Split each vector's magnitude linearly between its two nearest orientation bins."""
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    pos = ang * (nbins / (2.0 * np.pi))
    lo = np.floor(pos)
    frac = pos - lo
    b0 = lo.astype(np.int64) % nbins
    b1 = (b0 + 1) % nbins
    return mag, b0, b1, frac


def _accumulate(bins_and_weights, n: int, cells: np.ndarray, nbins: int, grid=GRID) -> np.ndarray:
    ncell = int(np.prod(grid))
    per_vol = cells.size
    vol_idx = np.repeat(np.arange(n), per_vol)
    cell_idx = np.tile(cells.ravel(), n)
    hist = np.zeros(n * ncell * nbins)
    base = (vol_idx * ncell + cell_idx) * nbins
    for b, w in bins_and_weights:
        hist += np.bincount(base + b.ravel(), weights=w.ravel(), minlength=hist.size)
    return hist.reshape(n, ncell * nbins)


def _orientation_histograms(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    n, L, H, W = gx.shape
    mag, b0, b1, frac = _soft_orientation(gx, gy)
    return _accumulate([(b0, mag * (1.0 - frac)), (b1, mag * frac)], n, _cell_index(L, H, W), ORIENT_BINS)


def hog_batch(vols: np.ndarray) -> np.ndarray:
    vols = np.asarray(vols, dtype=np.float64)
    gx, gy = _spatial_gradients(vols)
    return l2_normalize(_orientation_histograms(gx, gy))


def hof_batch(flow_vols: np.ndarray, zero_thresh: float = 0.4) -> np.ndarray:
    """8 orientation bins plus a trailing zero-motion bin per cell."""
    flow_vols = np.asarray(flow_vols, dtype=np.float64)
    u, v = flow_vols[..., 0], flow_vols[..., 1]
    n, L, H, W = u.shape
    mag, b0, b1, frac = _soft_orientation(u, v)
    moving = mag >= zero_thresh
    w = np.where(moving, mag, 0.0)
    zero_bin = np.full(b0.shape, ORIENT_BINS)
    hist = _accumulate([(b0, w * (1.0 - frac)), (b1, w * frac), (zero_bin, (~moving).astype(np.float64))],
                       n, _cell_index(L, H, W), ORIENT_BINS + 1)
    return l2_normalize(hist)


def mbh_batch(flow_vols: np.ndarray) -> np.ndarray:
    """[MBHx; MBHy]: orientation histograms of the spatial gradients of u and of v,
    each half normalized on its own."""
    flow_vols = np.asarray(flow_vols, dtype=np.float64)
    halves = []
    for c in range(2):
        gx, gy = _spatial_gradients(flow_vols[..., c])
        halves.append(l2_normalize(_orientation_histograms(gx, gy)))
    return np.concatenate(halves, axis=1)


def hog(vol: np.ndarray) -> np.ndarray:
    return hog_batch(np.asarray(vol)[None])[0]


def hof(vol: np.ndarray, zero_thresh: float = 0.4) -> np.ndarray:
    return hof_batch(np.asarray(vol)[None], zero_thresh)[0]


def mbh(vol: np.ndarray) -> np.ndarray:
    return mbh_batch(np.asarray(vol)[None])[0]


def root_sift(d: np.ndarray) -> np.ndarray:
    """L1-normalize each row, then take the element-wise square root."""
    d = np.asarray(d, dtype=np.float64)
    s = np.abs(d).sum(axis=-1, keepdims=True)
    return np.sqrt(np.where(s > 0, np.abs(d) / np.where(s > 0, s, 1.0), 0.0))


def xyt_extend(values: np.ndarray, locations: np.ndarray, dims: tuple[float, float, float]) -> np.ndarray:
    """Append (x/W, y/H, t/T) to every row; ``locations`` holds (x, y, t) per row."""
    values = np.atleast_2d(values)
    loc = np.atleast_2d(np.asarray(locations, dtype=np.float64)) / np.asarray(dims, dtype=np.float64)
    return np.hstack([values, np.clip(loc, 0.0, 1.0)])


@dataclass
class DescriptorSet:
    """Descriptors of one video (or a pool of videos): one row per trajectory in every kind.

    ``locations`` holds each row's (x, y, t) divided by the video's (W, H, T).
    """

    values: dict[str, np.ndarray]
    locations: np.ndarray

    def __post_init__(self):
        self.locations = np.asarray(self.locations, dtype=np.float64).reshape(-1, 3)
        for kind, v in self.values.items():
            if kind not in DIMS:
                raise ValueError(f"unknown descriptor kind {kind!r}")
            if v.ndim != 2 or len(v) != len(self.locations):
                raise ValueError(f"{kind}: expected {len(self.locations)} rows, got shape {v.shape}")

    def __len__(self) -> int:
        return len(self.locations)

    @property
    def kinds(self) -> list[str]:
        return [k for k in KINDS if k in self.values]

    @classmethod
    def empty(cls, kinds=KINDS) -> "DescriptorSet":
        return cls({k: np.zeros((0, DIMS[k])) for k in kinds}, np.zeros((0, 3)))

    @classmethod
    def concat(cls, sets: list["DescriptorSet"]) -> "DescriptorSet":
        if not sets:
            return cls.empty()
        kinds = sets[0].kinds
        return cls({k: np.concatenate([s.values[k] for s in sets]) for k in kinds},
                   np.concatenate([s.locations for s in sets]))

    def take(self, idx: np.ndarray) -> "DescriptorSet":
        return DescriptorSet({k: v[idx] for k, v in self.values.items()}, self.locations[idx])
