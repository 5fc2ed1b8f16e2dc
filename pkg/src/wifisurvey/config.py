"""Dataclass configuration tree, loaded from YAML with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class MapConfig:
    fixture: str | None = "floor3"   # room | plus | floor3; ignored when path is set
    path: str | None = None          # PGM + sidecar
    resolution_m: float = 0.1
    obstacle_threshold: int = 100
    robot_radius_m: float = 0.2


@dataclass
class SegmentationConfig:
    quantization_m: float = 0.5
    overlap_threshold: float = 0.40
    value_tolerance_m: float = 0.5


@dataclass
class PlanConfig:
    cell_size_m: float = 0.8


@dataclass
class WorldConfig:
    n_aps: int = 8
    ap_positions: list | None = None   # [[x, y], ...] overrides random placement
    shadow_sigma_db: float = 4.0
    corr_length_m: float = 2.0
    rho: float = 0.9
    n_features: int = 64
    p_floor: float = 0.02
    rssi_50_dbm: float = -88.0
    loss_slope_db: float = 3.0
    mean_stable_s: float = 65.0
    epoch_shift_sigma_db: float = 2.0


@dataclass
class SurveyConfig:
    scan_interval_s: float = 3.0
    dwell_s: float = 10.0
    scans_per_stop: int = 3


@dataclass
class MotionConfig:
    v_max_mps: float = 0.5
    accel_mps2: float = 0.3
    turn_rate_rad_s: float = 0.8


@dataclass
class PowerConfig:
    p_drive_w: float = 35.0
    p_idle_w: float = 10.0
    e_accel_wh: float = 0.05
    p_laser_w: float = 8.0
    p_laptop_w: float = 35.0


@dataclass
class RecoveryConfig:
    svr_c: float = 10.0
    epsilon_db: float = 0.5
    min_samples: int = 10


@dataclass
class GpConfig:
    lnr_threshold: float = 1.96
    min_shift_pairs: int = 5


@dataclass
class LocalizationConfig:
    method: str = "knn"          # knn | bayes
    knn_k: int = 2
    n_eval_points: int = 40
    obs_noise_var: float = 0.0


@dataclass
class PipelineConfig:
    map: MapConfig = field(default_factory=MapConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    survey: SurveyConfig = field(default_factory=SurveyConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    power: PowerConfig = field(default_factory=PowerConfig)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    gp: GpConfig = field(default_factory=GpConfig)
    localization: LocalizationConfig = field(default_factory=LocalizationConfig)
    seed: int = 0
    epoch: int = 0
    previous_db: str | None = None   # CSV of the previous epoch (maintenance runs)
    out_dir: str = "out"


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}; known: {sorted(known)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, f"{path}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Read a YAML config; omitted keys keep defaults, unknown keys are errors."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
    cfg = _from_dict(PipelineConfig, data, "config")
    for key, value in (overrides or {}).items():
        if not hasattr(cfg, key):
            raise ConfigError(f"override for unknown key {key}")
        setattr(cfg, key, value)
    return cfg


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: PipelineConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def dump_default_config(path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(PipelineConfig()), sort_keys=False))
