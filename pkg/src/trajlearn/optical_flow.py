"""Dense optical flow between consecutive frames, and homography-based camera-motion removal."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import CorruptHeaderError, DataError, GeometryError, TruncatedPayloadError
from .video_io import GrayVideo, Motion, displacements

FLO_MAGIC = b"FLO1"


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement (px/frame) from one frame to the next; ``u`` along x, ``v`` along y."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=np.float32)
        v = np.ascontiguousarray(self.v, dtype=np.float32)
        if u.shape != v.shape or u.ndim != 2:
            raise GeometryError(f"flow components must be equal 2-D arrays, got {u.shape} and {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise DataError("flow field contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def stack(self) -> np.ndarray:
        """``(height, width, 2)`` array with u in channel 0."""
        return np.stack([self.u, self.v], axis=-1)


@dataclass(frozen=True)
class FlowSequence:
    fields: list[FlowField]

    def __post_init__(self):
        if len({(f.height, f.width) for f in self.fields}) > 1:
            raise GeometryError("all flow fields in a sequence must share dimensions")

    def __len__(self) -> int:
        return len(self.fields)

    def __getitem__(self, i: int) -> FlowField:
        return self.fields[i]

    def stack(self) -> np.ndarray:
        """``(n, height, width, 2)`` array."""
        return np.stack([f.stack() for f in self.fields])


@dataclass(frozen=True)
class FlowParams:
    """Farneback settings: polynomial expansion over a ``poly_n`` neighbourhood with
    Gaussian weights of ``poly_sigma``; displacement averaged over a window of
    radius ``window_radius``; ``pyramid_levels`` coarse-to-fine levels."""

    pyramid_levels: int = 3
    window_radius: int = 7
    iterations: int = 3
    poly_n: int = 7
    poly_sigma: float = 1.5
    pyr_scale: float = 0.5


def _copy_border(flow: np.ndarray, r: int) -> np.ndarray:
    h, w = flow.shape[:2]
    r = min(r, (h - 1) // 2, (w - 1) // 2)
    if r <= 0:
        return flow
    ys = np.clip(np.arange(h), r, h - 1 - r)
    xs = np.clip(np.arange(w), r, w - 1 - r)
    return flow[np.ix_(ys, xs)]


def compute_flow(a: np.ndarray, b: np.ndarray, params: FlowParams = FlowParams()) -> FlowField:
    """Estimate the displacement field taking frame ``a`` to frame ``b``.

    Pixels within ``window_radius`` of the border copy the nearest interior
    estimate, where the windowed fit is unreliable.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise GeometryError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < 16:
        raise GeometryError(f"frames must be 2-D and at least 16x16, got {a.shape}")
    flow = cv2.calcOpticalFlowFarneback(
        a * 255.0, b * 255.0, None,
        params.pyr_scale, params.pyramid_levels, 2 * params.window_radius + 1,
        params.iterations, params.poly_n, params.poly_sigma, cv2.OPTFLOW_FARNEBACK_GAUSSIAN)
    flow = _copy_border(flow, params.window_radius)
    return FlowField(flow[..., 0], flow[..., 1])


def compute_flow_sequence(video: GrayVideo, params: FlowParams = FlowParams()) -> FlowSequence:
    if video.frames < 2:
        raise GeometryError("flow needs a video with at least 2 frames")
    return FlowSequence([compute_flow(video.frame(t), video.frame(t + 1), params)
                         for t in range(video.frames - 1)])


def synthetic_flow_sequence(motion: Motion, width: int, height: int, frames: int) -> FlowSequence:
    """Ground-truth flow of a :func:`~trajlearn.video_io.synth_video` clip."""
    fields = []
    for dx, dy in displacements(motion, frames):
        fields.append(FlowField(np.full((height, width), dx, np.float32),
                                np.full((height, width), dy, np.float32)))
    return FlowSequence(fields)


# -- camera-motion rectification --------------------------------------------

def _normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return (pts - c) * s, T


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT from >= 4 correspondences (rows of (x, y))."""
    ns, Ts = _normalize(src)
    nd, Td = _normalize(dst)
    n = len(src)
    A = np.zeros((2 * n, 9))
    x, y = ns[:, 0], ns[:, 1]
    u, v = nd[:, 0], nd[:, 1]
    A[0::2, 0:3] = np.column_stack([-x, -y, -np.ones(n)])
    A[0::2, 6:9] = np.column_stack([u * x, u * y, u])
    A[1::2, 3:6] = np.column_stack([-x, -y, -np.ones(n)])
    A[1::2, 6:9] = np.column_stack([v * x, v * y, v])
    _, _, vt = np.linalg.svd(A)
    H = np.linalg.inv(Td) @ vt[-1].reshape(3, 3) @ Ts
    return H / H[2, 2] if abs(H[2, 2]) > 1e-12 else H


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    with np.errstate(divide="ignore", invalid="ignore"):
        return ph[:, :2] / ph[:, 2:3]


def _collinear(pts: np.ndarray, tol: float = 1e-6) -> bool:
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return sv.size < 2 or sv[1] <= tol * max(sv[0], 1.0)


def _sample_degenerate(pts: np.ndarray) -> bool:
    for i in range(4):
        tri = np.delete(pts, i, axis=0)
        a, b, c = tri
        if abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) < 1e-6:
            return True
    return False


def ransac_homography(src: np.ndarray, dst: np.ndarray, threshold: float = 1.0,
                      iterations: int = 200, seed: int = 0) -> tuple[np.ndarray | None, np.ndarray]:
    """Return (homography or None, inlier mask)."""
    rng = np.random.default_rng(seed)
    n = len(src)
    best = np.zeros(n, dtype=bool)
    for _ in range(iterations):
        idx = rng.choice(n, 4, replace=False)
        if _sample_degenerate(src[idx]) or _sample_degenerate(dst[idx]):
            continue
        H = fit_homography(src[idx], dst[idx])
        err = np.linalg.norm(apply_homography(H, src) - dst, axis=1)
        inliers = np.nan_to_num(err, nan=np.inf) < threshold
        if inliers.sum() > best.sum():
            best = inliers
    if best.sum() < 4:
        return None, best
    return fit_homography(src[best], dst[best]), best


def rectify_flow(flow: FlowField, matches: tuple[np.ndarray, np.ndarray], threshold: float = 1.0,
                 iterations: int = 200, min_inlier_ratio: float = 0.5,
                 seed: int = 0) -> tuple[FlowField, bool]:
    """Subtract the displacement induced by a RANSAC homography fitted to ``matches``.

    ``matches`` is ``(src, dst)``, two ``(n, 2)`` arrays of corresponding
    (x, y) points. Returns ``(flow, ok)``; on RANSAC failure the input flow is
    returned unchanged with ``ok=False`` and a warning.
    """
    src = np.asarray(matches[0], dtype=np.float64)
    dst = np.asarray(matches[1], dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise GeometryError("matches must be two (n, 2) arrays of equal shape")
    if len(src) < 4:
        raise DataError(f"need at least 4 correspondences, got {len(src)}")
    if _collinear(src) or _collinear(dst):
        raise DataError("correspondences are collinear")
    H, inliers = ransac_homography(src, dst, threshold, iterations, seed)
    if H is None or inliers.mean() < min_inlier_ratio:
        warnings.warn(f"homography RANSAC failed ({int(inliers.sum())}/{len(src)} inliers); flow left unchanged",
                      RuntimeWarning, stacklevel=2)
        return flow, False
    yy, xx = np.mgrid[0:flow.height, 0:flow.width]
    grid = np.column_stack([xx.ravel(), yy.ravel()]).astype(np.float64)
    induced = (apply_homography(H, grid) - grid).reshape(flow.height, flow.width, 2)
    return FlowField(flow.u - induced[..., 0], flow.v - induced[..., 1]), True


def matches_from_flow(flow: FlowField, step: int = 8, margin: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Grid correspondences implied by the flow itself, used when no feature matcher is available."""
    ys = np.arange(margin, flow.height - margin, step)
    xs = np.arange(margin, flow.width - margin, step)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    src = np.column_stack([xx.ravel(), yy.ravel()]).astype(np.float64)
    dst = src + np.column_stack([flow.u[yy, xx].ravel(), flow.v[yy, xx].ravel()])
    return src, dst


def rectify_sequence(flows: FlowSequence, seed: int = 0) -> FlowSequence:
    out = []
    for i, f in enumerate(flows.fields):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                rect, _ = rectify_flow(f, matches_from_flow(f), seed=seed + i)
            except DataError:
                rect = f
        out.append(rect)
    return FlowSequence(out)


# -- FLO1 debug dumps --------------------------------------------------------

def save_flo(flow: FlowField, path: str | Path) -> None:
    header = FLO_MAGIC + struct.pack("<II", flow.width, flow.height)
    Path(path).write_bytes(header + flow.stack().astype("<f4").tobytes())


def load_flo(path: str | Path) -> FlowField:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"flow file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != FLO_MAGIC:
        raise CorruptHeaderError(f"{path}: missing FLO1 header")
    w, h = struct.unpack_from("<II", blob, 4)
    payload = blob[12:]
    if len(payload) < 8 * w * h:
        raise TruncatedPayloadError(f"{path}: payload shorter than {w}x{h} flow")
    arr = np.frombuffer(payload[:8 * w * h], dtype="<f4").reshape(h, w, 2)
    return FlowField(arr[..., 0], arr[..., 1])
