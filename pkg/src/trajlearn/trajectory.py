"""Dense point sampling, median-flow tracking, pruning and trajectory-aligned volumes."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates, median_filter, sobel, uniform_filter

from .errors import GeometryError
from .optical_flow import FlowField, FlowSequence
from .video_io import GrayVideo, ScalePyramid

PATCH = 32
TRACK_LENGTH = 15


@dataclass(frozen=True)
class Trajectory:
    points: np.ndarray  # (length, 2) of (x, y) at the pyramid level
    scale_index: int
    start_frame: int

    @property
    def length(self) -> int:
        return len(self.points)

    @property
    def mean_point(self) -> tuple[float, float, float]:
        x, y = self.points.mean(axis=0)
        return float(x), float(y), self.start_frame + (self.length - 1) / 2.0


@dataclass(frozen=True)
class TrackingConfig:
    length: int = TRACK_LENGTH
    step: int = 5
    refresh: int = 5
    margin: int = PATCH // 2
    texture_threshold: float = 0.001
    static_tol: float = 0.3
    max_jump: float = 16.0


def min_eigen_score(frame: np.ndarray) -> np.ndarray:
    """Smaller eigenvalue of the 3x3-summed structure tensor at each pixel."""
    f = np.asarray(frame, dtype=np.float64)
    gx = sobel(f, axis=1, mode="nearest")
    gy = sobel(f, axis=0, mode="nearest")
    a = uniform_filter(gx * gx, 3, mode="nearest")
    b = uniform_filter(gx * gy, 3, mode="nearest")
    c = uniform_filter(gy * gy, 3, mode="nearest")
    half_trace = 0.5 * (a + c)
    return half_trace - np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))


def grid_points(width: int, height: int, step: int = 5, margin: int = PATCH // 2) -> np.ndarray:
    """Grid positions ``margin + k*step`` that keep a full patch inside the frame, row-major."""
    xs = np.arange(margin, width - margin + 1, step)
    ys = np.arange(margin, height - margin + 1, step)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()]).astype(np.float64)


def dense_sample(frame: np.ndarray, step: int = 5, texture_threshold: float = 0.001,
                 margin: int = PATCH // 2) -> np.ndarray:
    """Grid points whose corner score beats ``texture_threshold`` times the frame maximum.

    Returns an ``(n, 2)`` array of (x, y); empty on textureless frames.
    """
    h, w = frame.shape
    if h < PATCH or w < PATCH:
        raise GeometryError(f"frame must be at least {PATCH}x{PATCH}, got {w}x{h}")
    pts = grid_points(w, h, step, margin)
    score = min_eigen_score(frame)
    top = score.max()
    if pts.size == 0 or top <= 1e-12:
        return np.zeros((0, 2))
    s = score[pts[:, 1].astype(int), pts[:, 0].astype(int)]
    return pts[s > texture_threshold * top]


def _round(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def median_flow(flow: FlowField) -> np.ndarray:
    """Per-component 3x3 median of a flow field, ``(h, w, 2)``."""
    return np.stack([median_filter(flow.u, size=3, mode="nearest"),
                     median_filter(flow.v, size=3, mode="nearest")], axis=-1)


def track_points(points: np.ndarray, smoothed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance many points through one median-filtered flow field.

    Returns ``(new_points, ok)``; ``ok`` is False where the rounded position is
    within 1 px of the border or the new position leaves the frame.
    """
    h, w = smoothed.shape[:2]
    xr, yr = _round(points[:, 0]), _round(points[:, 1])
    ok = (xr >= 1) & (xr <= w - 2) & (yr >= 1) & (yr <= h - 2)
    xc, yc = np.clip(xr, 0, w - 1), np.clip(yr, 0, h - 1)
    new = points + smoothed[yc, xc]
    ok &= (new[:, 0] >= 0) & (new[:, 0] <= w - 1) & (new[:, 1] >= 0) & (new[:, 1] <= h - 1)
    return new, ok


def track_point(point: tuple[float, float], flow: FlowField) -> tuple[float, float] | None:
    """Move one point by the 3x3 median flow at its rounded position; None when tracking fails."""
    x, y = point
    xr, yr = int(_round(x)), int(_round(y))
    if not (1 <= xr <= flow.width - 2 and 1 <= yr <= flow.height - 2):
        return None
    du = float(np.median(flow.u[yr - 1:yr + 2, xr - 1:xr + 2]))
    dv = float(np.median(flow.v[yr - 1:yr + 2, xr - 1:xr + 2]))
    nx, ny = x + du, y + dv
    if not (0 <= nx <= flow.width - 1 and 0 <= ny <= flow.height - 1):
        return None
    return nx, ny


def displacement_magnitudes(points: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.diff(points, axis=0), axis=1)


def is_static(traj: Trajectory, tol: float = 0.3) -> bool:
    """Static when both the mean and the spread of per-frame displacement are below ``tol``."""
    m = displacement_magnitudes(traj.points)
    return bool(m.mean() < tol and m.std() < tol)


def trajectory_shape(traj: Trajectory) -> np.ndarray:
    """Displacements normalized by their summed magnitude, flattened to (dx0, dy0, dx1, ...)."""
    d = np.diff(traj.points, axis=0)
    total = np.linalg.norm(d, axis=1).sum()
    if total <= 0:
        return np.zeros(d.size)
    return (d / total).ravel()


def extract_trajectories_level(video: GrayVideo, flows: FlowSequence, scale_index: int,
                               cfg: TrackingConfig = TrackingConfig()) -> list[Trajectory]:
    L = cfg.length
    if len(flows) != video.frames - 1:
        raise GeometryError(f"expected {video.frames - 1} flow fields, got {len(flows)}")
    smoothed = [median_flow(f) for f in flows.fields]
    occupancy: list[tuple[int, np.ndarray, np.ndarray]] = []  # (start, points (n,L,2), alive (n,L))
    kept: list[Trajectory] = []
    for start in range(0, video.frames - L + 1, cfg.refresh):
        cand = dense_sample(video.frame(start), cfg.step, cfg.texture_threshold, cfg.margin)
        if cand.size and occupancy:
            taken = set()
            for s0, pts, alive in occupancy:
                k = start - s0
                if k < L:
                    for x, y in pts[alive[:, k], k]:
                        taken.add((int(_round((x - cfg.margin) / cfg.step)),
                                   int(_round((y - cfg.margin) / cfg.step))))
            cells = zip(_round((cand[:, 0] - cfg.margin) / cfg.step), _round((cand[:, 1] - cfg.margin) / cfg.step))
            cand = cand[[(int(cx), int(cy)) not in taken for cx, cy in cells]]
        if cand.size == 0:
            continue
        n = len(cand)
        pts = np.zeros((n, L, 2))
        alive = np.zeros((n, L), dtype=bool)
        pts[:, 0], alive[:, 0] = cand, True
        for k in range(1, L):
            new, ok = track_points(pts[:, k - 1], smoothed[start + k - 1])
            pts[:, k] = np.where(alive[:, k - 1, None], new, pts[:, k - 1])
            alive[:, k] = alive[:, k - 1] & ok
        occupancy.append((start, pts, alive))
        for i in range(n):
            if not alive[i, -1]:
                continue
            traj = Trajectory(pts[i].copy(), scale_index, start)
            mags = displacement_magnitudes(traj.points)
            if mags.max() > cfg.max_jump or is_static(traj, cfg.static_tol):
                continue
            kept.append(traj)
    return kept


def extract_trajectories(pyramid: ScalePyramid, flows: list[FlowSequence],
                         cfg: TrackingConfig = TrackingConfig()) -> list[Trajectory]:
    """Track every pyramid level separately; output ordered by (scale, start frame, grid order)."""
    if len(flows) != len(pyramid):
        raise GeometryError(f"{len(flows)} flow sequences for {len(pyramid)} pyramid levels")
    out = []
    for level, (video, fl) in enumerate(zip(pyramid.levels, flows)):
        out.extend(extract_trajectories_level(video, fl, level, cfg))
    return out


def _patch_coords(trajs: list[Trajectory], n_frames: int, size: int):
    """Sampling coordinates (t, y, x) for every trajectory, point and patch pixel."""
    offs = np.arange(size) - (size - 1) / 2.0
    pts = np.stack([t.points for t in trajs])  # (N, L, 2)
    L = pts.shape[1]
    frames = np.array([[min(t.start_frame + k, n_frames - 1) for k in range(L)] for t in trajs], dtype=np.float64)
    shape = (len(trajs), L, size, size)
    tt = np.broadcast_to(frames[:, :, None, None], shape)
    yy = np.broadcast_to(pts[:, :, 1, None, None] + offs[None, None, :, None], shape)
    xx = np.broadcast_to(pts[:, :, 0, None, None] + offs[None, None, None, :], shape)
    return tt, yy, xx


def extract_volumes(video: GrayVideo, trajs: list[Trajectory], size: int = PATCH) -> np.ndarray:
    """Gray volumes ``(N, L, size, size)``: bilinear patches centred on each tracked point."""
    if not trajs:
        return np.zeros((0, TRACK_LENGTH, size, size), np.float32)
    tt, yy, xx = _patch_coords(trajs, video.frames, size)
    vals = map_coordinates(video.data, [tt.ravel(), yy.ravel(), xx.ravel()], order=1, mode="nearest")
    return vals.reshape(tt.shape).astype(np.float32)


def extract_flow_volumes(flows: FlowSequence, trajs: list[Trajectory], size: int = PATCH) -> np.ndarray:
    """Flow volumes ``(N, L, size, size, 2)``. The point at frame t reads flow field t; a
    track ending on the last video frame reuses the final field for its last point."""
    if not trajs:
        return np.zeros((0, TRACK_LENGTH, size, size, 2), np.float32)
    stacked = flows.stack()
    tt, yy, xx = _patch_coords(trajs, len(flows), size)
    coords = [tt.ravel(), yy.ravel(), xx.ravel()]
    u = map_coordinates(stacked[..., 0], coords, order=1, mode="nearest")
    v = map_coordinates(stacked[..., 1], coords, order=1, mode="nearest")
    return np.stack([u, v], axis=-1).reshape(tt.shape + (2,)).astype(np.float32)


def extract_volume(video: GrayVideo, traj: Trajectory) -> np.ndarray:
    return extract_volumes(video, [traj])[0]


def extract_flow_volume(flows: FlowSequence, traj: Trajectory) -> np.ndarray:
    return extract_flow_volumes(flows, [traj])[0]


def write_trajectories_csv(trajs: list[Trajectory], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        L = trajs[0].length if trajs else TRACK_LENGTH
        w.writerow(["scale_index", "start_frame"] + [f"{a}{k}" for k in range(L) for a in "xy"])
        for t in trajs:
            w.writerow([t.scale_index, t.start_frame] + [f"{v:.6f}" for v in t.points.ravel()])


def read_trajectories_csv(path: str | Path) -> list[Trajectory]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [Trajectory(np.array(r[2:], dtype=np.float64).reshape(-1, 2), int(r[0]), int(r[1])) for r in rows]
