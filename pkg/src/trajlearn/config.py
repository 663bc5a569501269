"""Pipeline configuration: typed TOML sections with the published defaults."""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .convisa import VOLUME, ConvIsaConfig
from .descriptors import KINDS
from .errors import DataError, GeometryError
from .isa import TrainOpts
from .mir import MirParams
from .optical_flow import FlowParams
from .trajectory import TrackingConfig


@dataclass(frozen=True)
class VideoConfig:
    num_scales: int = 8
    scale_factor: float = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class StabilizeConfig:
    enabled: bool = False  # rectified flow then feeds tracking, HOF, MBH and LOF alike


@dataclass(frozen=True)
class DescriptorConfig:
    kinds: tuple[str, ...] = KINDS
    hof_zero_thresh: float = 0.4
    root_sift: bool = True


@dataclass(frozen=True)
class EncodingConfig:
    K: int = 256
    gmm_samples: int = 256_000
    power_alpha: float = 0.5
    xyt: bool = False
    mifs_skips: tuple[int, ...] = (0,)


@dataclass(frozen=True)
class SvmConfig:
    C: float = 100.0
    tol: float = 1e-3


@dataclass(frozen=True)
class PipelineConfig:
    video: VideoConfig = field(default_factory=VideoConfig)
    flow: FlowParams = field(default_factory=FlowParams)
    stabilize: StabilizeConfig = field(default_factory=StabilizeConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    descriptors: DescriptorConfig = field(default_factory=DescriptorConfig)
    convisa: ConvIsaConfig = field(default_factory=ConvIsaConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    mir: MirParams = field(default_factory=MirParams)
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        """Check cross-module consistency; raises GeometryError naming the violated relation."""
        if self.tracking.length != VOLUME[1]:
            raise GeometryError(f"tracking.length == volume frames violated: {self.tracking.length} != {VOLUME[1]}")
        unknown = [k for k in self.descriptors.kinds if k not in KINDS]
        if unknown:
            raise DataError(f"unknown descriptor kinds {unknown}")
        for channels in (1, 2):
            self.convisa.check(channels)
        if any(s < 0 for s in self.encoding.mifs_skips):
            raise DataError("mifs_skips must be non-negative")
        return self


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise DataError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise DataError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise DataError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise DataError(f"{key}: expected an array, got {value!r}")
        if default:
            return tuple(_coerce(v, default[0], key) for v in value)
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise DataError(f"{key}: expected a string, got {value!r}")
        return value
    raise DataError(f"{key}: unsupported value {value!r}")


def _apply(obj, table: dict, prefix: str):
    updates = {}
    known = {f.name: f for f in fields(obj)}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if key not in known:
            raise DataError(f"unknown config key {name!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise DataError(f"{name}: expected a table")
            updates[key] = _apply(current, value, name + ".")
        else:
            updates[key] = _coerce(value, current, name)
    return replace(obj, **updates)


def config_from_dict(data: dict) -> PipelineConfig:
    return _apply(PipelineConfig(), data, "").validate()


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return f'"{v}"'
    return repr(v)


def dump_config(cfg: PipelineConfig) -> str:
    """Render a config as TOML (every key, one table per section)."""
    top, sections = [], []

    def section(obj, name):
        lines, subs = [f"[{name}]"], []
        for f in fields(obj):
            v = getattr(obj, f.name)
            if is_dataclass(v):
                subs.append((v, f"{name}.{f.name}"))
            else:
                lines.append(f"{f.name} = {_toml_value(v)}")
        sections.append("\n".join(lines))
        for v, n in subs:
            section(v, n)

    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            section(v, f.name)
        else:
            top.append(f"{f.name} = {_toml_value(v)}")
    return "\n".join(top) + "\n\n" + "\n\n".join(sections) + "\n"


def desk_scale_config(seed: int = 0) -> PipelineConfig:
    """Small-budget settings for synthetic runs: 2 scales, K=8, 5000 ConvISA volumes."""
    base = PipelineConfig()
    return replace(base,
                   video=replace(base.video, num_scales=2),
                   convisa=replace(base.convisa, sample_count=5000, isa=TrainOpts(epochs=100)),
                   encoding=replace(base.encoding, K=8, gmm_samples=20_000),
                   seed=seed).validate()
