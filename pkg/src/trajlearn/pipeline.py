"""End-to-end orchestration: per-video feature extraction, dataset manifests, and the
synthetic benchmark."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .classify import ScoreMatrix, eval_macc, eval_map, ova_predict, ova_train
from .config import PipelineConfig
from .container import TensorFile
from .convisa import TwoStreamModel, train_two_stream
from .descriptors import HISTOGRAM_KINDS, DescriptorSet, hof_batch, hog_batch, mbh_batch, root_sift
from .encoding import FisherEncoder, encode_video, mifs_stack, train_encoder
from .errors import DataError
from .mir import mir_rerank, rank_score_fuse
from .optical_flow import compute_flow_sequence, rectify_sequence
from .trajectory import (PATCH, TRACK_LENGTH, Trajectory, extract_flow_volumes, extract_trajectories_level,
                         extract_volumes, trajectory_shape)
from .video_io import GrayVideo, Oscillate, Translate, build_scale_pyramid, load_video, synth_video

log = logging.getLogger(__name__)

HAND_KINDS = ("traj_shape", "hog", "hof", "mbh")
LEARNED_KINDS = ("lop", "lof")


# -- per-video features ------------------------------------------------------

@dataclass
class VideoFeatures:
    """Everything extracted from one video, one row per trajectory."""

    descriptors: DescriptorSet
    pixel_volumes: np.ndarray  # (N, 15, 32, 32) float32
    flow_volumes: np.ndarray  # (N, 15, 32, 32, 2) float32
    trajectories: list[Trajectory] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.descriptors)

    @classmethod
    def empty(cls, kinds=HAND_KINDS) -> "VideoFeatures":
        return cls(DescriptorSet.empty(kinds), np.zeros((0, TRACK_LENGTH, PATCH, PATCH), np.float32),
                   np.zeros((0, TRACK_LENGTH, PATCH, PATCH, 2), np.float32), [])

    @classmethod
    def concat(cls, parts: list["VideoFeatures"]) -> "VideoFeatures":
        return cls(DescriptorSet.concat([p.descriptors for p in parts]),
                   np.concatenate([p.pixel_volumes for p in parts]),
                   np.concatenate([p.flow_volumes for p in parts]),
                   [t for p in parts for t in p.trajectories])

    def with_learned(self, model: TwoStreamModel) -> "VideoFeatures":
        """Add LOP / LOF rows computed from the stored volumes."""
        values = dict(self.descriptors.values)
        if len(self):
            values["lop"], values["lof"] = model.describe(self.pixel_volumes, self.flow_volumes)
        else:
            values["lop"] = np.zeros((0, model.pixel_model.output_dim))
            values["lof"] = np.zeros((0, model.flow_model.output_dim))
        return replace(self, descriptors=DescriptorSet(values, self.descriptors.locations))

    def to_tensors(self, video_id: str) -> tuple[dict[str, np.ndarray], dict]:
        t = {f"desc.{k}": v for k, v in self.descriptors.values.items()}
        t["locations"] = self.descriptors.locations
        t["pixel_volumes"] = self.pixel_volumes
        t["flow_volumes"] = self.flow_volumes
        t["tracks"] = (np.stack([tr.points for tr in self.trajectories]) if self.trajectories
                       else np.zeros((0, TRACK_LENGTH, 2)))
        t["track_info"] = np.array([[tr.scale_index, tr.start_frame] for tr in self.trajectories],
                                   dtype=np.float64).reshape(-1, 2)
        return t, {"kind": "video_features", "id": video_id, "kinds": self.descriptors.kinds,
                   "count": len(self)}

    @classmethod
    def from_tensors(cls, tf: TensorFile) -> "VideoFeatures":
        if tf.meta.get("kind") != "video_features":
            raise DataError("container does not hold video features")
        values = {k: np.asarray(tf[f"desc.{k}"], np.float64) for k in tf.meta["kinds"]}
        info = tf["track_info"].astype(int)
        trajs = [Trajectory(np.asarray(p, np.float64), int(s), int(f)) for p, (s, f) in zip(tf["tracks"], info)]
        return cls(DescriptorSet(values, tf["locations"]), tf["pixel_volumes"], tf["flow_volumes"], trajs)


def hand_descriptors(pixel_volumes: np.ndarray, flow_volumes: np.ndarray, trajs: list[Trajectory],
                     cfg: PipelineConfig) -> dict[str, np.ndarray]:
    kinds = [k for k in HAND_KINDS if k in cfg.descriptors.kinds]
    out = {}
    if "traj_shape" in kinds:
        out["traj_shape"] = (np.stack([trajectory_shape(t) for t in trajs]) if trajs else np.zeros((0, 28)))
    if "hog" in kinds:
        out["hog"] = hog_batch(pixel_volumes)
    if "hof" in kinds:
        out["hof"] = hof_batch(flow_volumes, cfg.descriptors.hof_zero_thresh)
    if "mbh" in kinds:
        out["mbh"] = mbh_batch(flow_volumes)
    if cfg.descriptors.root_sift:
        for k in HISTOGRAM_KINDS:
            if k in out:
                out[k] = root_sift(out[k])
    return out


def extract_single_rate(video: GrayVideo, cfg: PipelineConfig) -> VideoFeatures:
    """Trajectories, aligned volumes and hand-crafted descriptors over all pyramid levels."""
    pyr = build_scale_pyramid(video, cfg.video.num_scales, cfg.video.scale_factor)
    dims = np.array([video.width, video.height, video.frames], dtype=np.float64)
    parts = []
    for level, lv in enumerate(pyr.levels):
        if lv.frames < cfg.tracking.length:
            break
        flows = compute_flow_sequence(lv, cfg.flow)
        if cfg.stabilize.enabled:
            flows = rectify_sequence(flows, seed=cfg.seed)
        trajs = extract_trajectories_level(lv, flows, level, cfg.tracking)
        if not trajs:
            continue
        pv = extract_volumes(lv, trajs)
        fv = extract_flow_volumes(flows, trajs)
        sx, sy = pyr.scale_of(level)
        loc = np.array([t.mean_point for t in trajs]) * np.array([sx, sy, 1.0]) / dims
        parts.append(VideoFeatures(DescriptorSet(hand_descriptors(pv, fv, trajs, cfg), loc), pv, fv, trajs))
    kinds = [k for k in HAND_KINDS if k in cfg.descriptors.kinds]
    return VideoFeatures.concat(parts) if parts else VideoFeatures.empty(kinds)


def extract_video(video: GrayVideo, cfg: PipelineConfig) -> tuple[VideoFeatures, dict]:
    """Features pooled over the configured frame-skip rates, with the skip report."""
    feats, report = mifs_stack(video, cfg.encoding.mifs_skips, lambda v: extract_single_rate(v, cfg),
                               cfg.tracking.length)
    if not isinstance(feats, VideoFeatures):
        feats = VideoFeatures.empty([k for k in HAND_KINDS if k in cfg.descriptors.kinds])
    return feats, report


def _extract_path(args) -> tuple[VideoFeatures, dict]:
    path, cfg = args
    return extract_video(load_video(path), cfg)


def extract_many(paths: Sequence[str | Path], cfg: PipelineConfig, workers: int = 1):
    """Extract features for each path; results come back in input order."""
    jobs = [(p, cfg) for p in paths]
    if workers <= 1:
        yield from map(_extract_path, jobs)
        return
    with ProcessPoolExecutor(workers) as pool:
        yield from pool.map(_extract_path, jobs)


def pool_descriptors(features: Sequence[VideoFeatures]) -> DescriptorSet:
    return DescriptorSet.concat([f.descriptors for f in features if len(f)]) if any(
        len(f) for f in features) else DescriptorSet.empty()


def stack_volumes(features: Sequence[VideoFeatures], limit: int, rng: np.random.Generator):
    """Pixel and flow volumes pooled across videos, subsampled to at most ``limit`` rows."""
    counts = np.array([len(f) for f in features])
    total = int(counts.sum())
    chosen = np.arange(total) if total <= limit else np.sort(rng.choice(total, limit, replace=False))
    owner = np.repeat(np.arange(len(features)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    pix = np.empty((len(chosen), TRACK_LENGTH, PATCH, PATCH), np.float32)
    flo = np.empty((len(chosen), TRACK_LENGTH, PATCH, PATCH, 2), np.float32)
    for j, g in enumerate(chosen):
        f = features[owner[g]]
        pix[j], flo[j] = f.pixel_volumes[local[g]], f.flow_volumes[local[g]]
    return pix, flo


# -- dataset manifests -------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    path: Path
    labels: list[str]
    split: str


@dataclass
class DatasetManifest:
    classes: list[str]
    entries: list[ManifestEntry]

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes) or not self.classes:
            raise DataError("manifest classes must be a non-empty list of distinct names")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest video ids must be unique")
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise DataError(f"{e.id}: split must be 'train' or 'test', got {e.split!r}")
            bad = [lab for lab in e.labels if lab not in self.classes]
            if bad or not e.labels:
                raise DataError(f"{e.id}: labels {bad or e.labels} not drawn from the class list")
        for split in ("train", "test"):
            if not self.split(split):
                raise DataError(f"manifest has an empty {split} split")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def label_index(self, entry: ManifestEntry) -> int:
        return self.classes.index(entry.labels[0])

    def truth_matrix(self, entries: Sequence[ManifestEntry]) -> np.ndarray:
        T = np.zeros((len(entries), len(self.classes)), dtype=bool)
        for i, e in enumerate(entries):
            for lab in e.labels:
                T[i, self.classes.index(lab)] = True
        return T

    def to_json(self, root: Path | None = None) -> str:
        def rel(p: Path) -> str:
            return str(p.relative_to(root)) if root is not None and p.is_relative_to(root) else str(p)
        return json.dumps({"classes": self.classes,
                           "videos": [{"id": e.id, "path": rel(e.path), "labels": e.labels, "split": e.split}
                                      for e in self.entries]}, indent=2)


def load_manifest(path: str | Path) -> DatasetManifest:
    """JSON manifest; relative video paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text())
        entries = [ManifestEntry(str(v.get("id") or Path(v["path"]).stem), path.parent / v["path"],
                                 list(v["labels"]), v["split"]) for v in data["videos"]]
        return DatasetManifest(list(data["classes"]), entries)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc})") from exc


# -- synthetic benchmark -----------------------------------------------------

def synthetic_motion(cls: int, rng: np.random.Generator):
    """Jittered motion for one of six classes: +x, +y, x-oscillation, y-oscillation, -x, -y."""
    speed = rng.uniform(0.8, 1.5)
    drift = rng.uniform(-0.15, 0.15)
    period, amp = rng.uniform(8.0, 12.0), rng.uniform(2.5, 3.5)
    return [Translate(speed, drift), Translate(drift, speed), Oscillate("x", period, amp),
            Oscillate("y", period, amp), Translate(-speed, drift), Translate(drift, -speed)][cls]


SYNTH_CLASSES = ("right", "down", "wave_x", "wave_y", "left", "up")


@dataclass
class BenchReport:
    macc: float
    map: float
    macc_mir: float
    map_mir: float
    train_videos: int
    test_videos: int
    descriptors_per_video: float
    seconds: float
    kinds: list[str]

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def bench_synthetic(classes: int = 4, videos_per_class: int = 10, seed: int = 0,
                    cfg: PipelineConfig | None = None, size=(64, 64, 32)) -> BenchReport:
    """Synthetic motion classes through the whole pipeline; the second half of each class is held out."""
    from .config import desk_scale_config

    if not 2 <= classes <= len(SYNTH_CLASSES):
        raise DataError(f"synthetic benchmark supports 2..{len(SYNTH_CLASSES)} classes")
    if videos_per_class < 2:
        raise DataError("need at least two videos per class")
    cfg = cfg or desk_scale_config(seed)
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    n_train = videos_per_class // 2
    videos, labels, split = [], [], []
    for c in range(classes):
        for i in range(videos_per_class):
            motion = synthetic_motion(c, rng)
            videos.append(synth_video(motion, size, int(rng.integers(2**31 - 1))))
            labels.append(c)
            split.append(i < n_train)
    labels, split = np.array(labels), np.array(split)
    feats = [extract_video(v, cfg)[0] for v in videos]
    train_idx, test_idx = np.flatnonzero(split), np.flatnonzero(~split)

    model_seed, enc_seed, svm_seed, vol_seed = (int(s) for s in rng.integers(0, 2**31 - 1, 4))
    kinds = list(cfg.descriptors.kinds)
    if any(k in LEARNED_KINDS for k in kinds):
        pix, flo = stack_volumes([feats[i] for i in train_idx], cfg.convisa.sample_count,
                                 np.random.default_rng(vol_seed))
        model = train_two_stream(pix, flo, cfg.convisa, model_seed)
        del pix, flo
        feats = [f.with_learned(model) for f in feats]
    for f in feats:  # volumes are no longer needed
        f.pixel_volumes = f.flow_volumes = None

    def restrict(ds: DescriptorSet) -> DescriptorSet:
        return DescriptorSet({k: ds.values[k] for k in kinds}, ds.locations)

    pool = restrict(pool_descriptors([feats[i] for i in train_idx]))
    encoder = train_encoder(pool, cfg.encoding.K, enc_seed, cfg.encoding.gmm_samples, kinds,
                            cfg.encoding.xyt, cfg.encoding.power_alpha)
    X = np.stack([encode_video(restrict(f.descriptors), encoder).vector for f in feats])
    models = ova_train(X[train_idx], labels[train_idx], classes, cfg.svm.C, svm_seed)
    names = list(SYNTH_CLASSES[:classes])
    scores = ova_predict(models, X[test_idx], names, [f"v{i:03d}" for i in test_idx])
    truth = labels[test_idx]
    reranked, _ = mir_rerank(scores, cfg.mir)
    fused = rank_score_fuse(reranked, scores)
    return BenchReport(eval_macc(scores, truth), eval_map(scores, truth), eval_macc(fused, truth),
                       eval_map(fused, truth), len(train_idx), len(test_idx),
                       float(np.mean([len(f) for f in feats])), time.perf_counter() - t0, kinds)


def encode_all(features: Sequence[VideoFeatures], encoder: FisherEncoder) -> np.ndarray:
    return np.stack([encode_video(f.descriptors, encoder).vector for f in features])


def score_matrix(models, X: np.ndarray, names: list[str], ids: list[str]) -> ScoreMatrix:
    return ova_predict(models, X, names, ids)
