"""Grayscale video containers, file formats, scale pyramids and synthetic test videos."""
from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import CorruptHeaderError, DataError, GeometryError, TruncatedPayloadError

RGV_MAGIC = b"RGV1"
MIN_PATCH = 32


@dataclass(frozen=True)
class GrayVideo:
    """Frames as a ``(frames, height, width)`` float32 array with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise GeometryError(f"video data must be 3-D (frames, height, width), got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min(initial=0.0) < 0.0 or data.max(initial=0.0) > 1.0:
            raise DataError("video intensities must be finite and inside [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def frame(self, t: int) -> np.ndarray:
        return self.data[t]

    def subsample(self, every: int) -> "GrayVideo":
        """Keep every ``every``-th frame, starting at frame 0."""
        return GrayVideo(self.data[::every])


# -- file formats ------------------------------------------------------------

def _to_u8(video: GrayVideo) -> np.ndarray:
    return np.clip(np.rint(video.data * 255.0), 0, 255).astype(np.uint8)


def save_rgv(video: GrayVideo, path: str | Path) -> None:
    header = RGV_MAGIC + struct.pack("<III", video.width, video.height, video.frames)
    Path(path).write_bytes(header + _to_u8(video).tobytes())


def load_rgv(path: str | Path) -> GrayVideo:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"video file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != RGV_MAGIC:
        raise CorruptHeaderError(f"{path}: missing RGV1 header")
    width, height, frames = struct.unpack_from("<III", blob, 4)
    expected = width * height * frames
    payload = blob[16:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: header declares {width}x{height}x{frames} = {expected} bytes, payload has {len(payload)}")
    if len(payload) > expected or expected == 0:
        raise CorruptHeaderError(f"{path}: declared size {expected} inconsistent with payload of {len(payload)} bytes")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(frames, height, width)
    return GrayVideo(data.astype(np.float32) / 255.0)


def write_pgm(image: np.ndarray, path: str | Path) -> None:
    """Write a float image in [0, 1] (or uint8) as a binary P5 file."""
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + image.tobytes())


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary P5 file into a uint8 array."""
    blob = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(blob, pos)
        if m is None:
            raise CorruptHeaderError(f"{path}: incomplete PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise CorruptHeaderError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise CorruptHeaderError(f"{path}: bad PGM header") from exc
    if maxval > 255:
        raise CorruptHeaderError(f"{path}: 16-bit PGM is not supported")
    pos += 1  # single whitespace byte after maxval
    payload = blob[pos:pos + w * h]
    if len(payload) < w * h:
        raise TruncatedPayloadError(f"{path}: expected {w * h} pixel bytes, found {len(payload)}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    if maxval != 255:
        img = np.rint(img.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return img


def load_pgm_sequence(directory: str | Path) -> GrayVideo:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise DataError(f"{directory}: no .pgm frames")
    frames = [read_pgm(p) for p in files]
    if len({f.shape for f in frames}) != 1:
        raise CorruptHeaderError(f"{directory}: frames have differing sizes")
    return GrayVideo(np.stack(frames).astype(np.float32) / 255.0)


def save_pgm_sequence(video: GrayVideo, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digits = max(4, len(str(video.frames)))
    for t, frame in enumerate(_to_u8(video)):
        write_pgm(frame, directory / f"frame_{t:0{digits}d}.pgm")


def load_video(path: str | Path, format: str | None = None) -> GrayVideo:
    """Load an RGV file or a directory of PGM frames (``format`` auto-detected when None)."""
    path = Path(path)
    if format is None:
        format = "pgm_sequence" if path.is_dir() else "rgv"
    if format == "rgv":
        return load_rgv(path)
    if format in ("pgm", "pgm_sequence"):
        return load_pgm_sequence(path)
    raise ValueError(f"unknown video format {format!r}")


def save_video(video: GrayVideo, path: str | Path, format: str = "rgv") -> None:
    if format == "rgv":
        save_rgv(video, path)
    elif format in ("pgm", "pgm_sequence"):
        save_pgm_sequence(video, path)
    else:
        raise ValueError(f"unknown video format {format!r}")


# -- scale pyramid -----------------------------------------------------------

@dataclass(frozen=True)
class ScalePyramid:
    levels: list[GrayVideo]
    factor: float

    def __len__(self) -> int:
        return len(self.levels)

    def scale_of(self, level: int) -> tuple[float, float]:
        """Multipliers (sx, sy) mapping level coordinates back to level 0."""
        base, lv = self.levels[0], self.levels[level]
        return base.width / lv.width, base.height / lv.height


def resize_frames(data: np.ndarray, width: int, height: int) -> np.ndarray:
    return np.stack([cv2.resize(f, (width, height), interpolation=cv2.INTER_LINEAR) for f in data])


def build_scale_pyramid(video: GrayVideo, num_scales: int = 8,
                        factor: float = 1.0 / math.sqrt(2.0)) -> ScalePyramid:
    """Bilinear pyramid; levels narrower or shorter than a 32 px patch are dropped."""
    if num_scales < 1 or not 0.0 < factor < 1.0:
        raise ValueError("num_scales must be >= 1 and factor in (0, 1)")
    levels = [video]
    for i in range(1, num_scales):
        w = int(round(video.width * factor ** i))
        h = int(round(video.height * factor ** i))
        if w < MIN_PATCH or h < MIN_PATCH:
            break
        prev = levels[-1]
        if w >= prev.width and h >= prev.height:
            continue
        data = np.clip(resize_frames(video.data, w, h), 0.0, 1.0)
        levels.append(GrayVideo(data))
    return ScalePyramid(levels, factor)


# -- synthetic videos --------------------------------------------------------

@dataclass(frozen=True)
class Translate:
    vx: float
    vy: float

    def offset(self, t: float) -> tuple[float, float]:
        return self.vx * t, self.vy * t


@dataclass(frozen=True)
class Static:
    def offset(self, t: float) -> tuple[float, float]:
        return 0.0, 0.0


@dataclass(frozen=True)
class Oscillate:
    axis: str  # "x" or "y"
    period: float
    amplitude: float = 3.0

    def offset(self, t: float) -> tuple[float, float]:
        d = self.amplitude * math.sin(2.0 * math.pi * t / self.period)
        return (d, 0.0) if self.axis == "x" else (0.0, d)


Motion = Translate | Static | Oscillate

_MOTION_RE = re.compile(r"^\s*(translate|static|oscillate)\s*(?:\((.*)\))?\s*$")


def parse_motion(text: str) -> Motion:
    """Parse ``translate(1,0)``, ``static`` or ``oscillate(x,10[,3])``."""
    m = _MOTION_RE.match(text)
    if m is None:
        raise ValueError(f"cannot parse motion {text!r}")
    kind, args = m.group(1), [a.strip() for a in (m.group(2) or "").split(",") if a.strip()]
    if kind == "static":
        return Static()
    if kind == "translate":
        return Translate(float(args[0]), float(args[1]))
    return Oscillate(args[0], *(float(a) for a in args[1:]))


def displacements(motion: Motion, frames: int) -> np.ndarray:
    """Ground-truth per-frame displacement (dx, dy) from frame t to t+1, shape (frames-1, 2)."""
    offs = np.array([motion.offset(t) for t in range(frames)], dtype=np.float64)
    return np.diff(offs, axis=0)


def random_texture(height: int, width: int, rng: np.random.Generator, sigma: float = 2.0) -> np.ndarray:
    tex = gaussian_filter(rng.random((height, width)), sigma, mode="wrap")
    tex -= tex.min()
    tex /= tex.max()
    return tex


def synth_video(motion: Motion, size: tuple[int, int, int] = (64, 64, 16), seed: int = 0) -> GrayVideo:
    """A smooth random texture on a periodic canvas, moved rigidly by ``motion``.

    ``size`` is (width, height, frames). Frame t samples the texture at
    ``x - offset_x(t)``, so interior pixels move by exactly the displacement
    returned by :func:`displacements`.
    """
    width, height, frames = size
    if width < MIN_PATCH or height < MIN_PATCH or frames < 16:
        raise GeometryError(f"synthetic video must be at least 32x32x16, got {width}x{height}x{frames}")
    rng = np.random.default_rng(seed)
    ch, cw = 2 * height, 2 * width
    tex = random_texture(ch, cw, rng)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.empty((frames, height, width), dtype=np.float32)
    for t in range(frames):
        dx, dy = motion.offset(t)
        out[t] = map_coordinates(tex, [yy - dy, xx - dx], order=1, mode="grid-wrap")
    return GrayVideo(np.clip(out, 0.0, 1.0))
