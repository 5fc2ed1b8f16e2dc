"""End-to-end orchestration: floor geometry, world generation, survey,
recovery, abnormal repair (with simulated resurvey), map building and
evaluation, plus the with/without-sojourn comparison.

Every stage writes its artifact under the output directory so any stage
can be re-run from the previous one's file. All randomness flows from the
configured seed through named sub-streams (world / survey / resurvey /
eval), so a run is reproducible byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fixtures, gridmap
from .config import PipelineConfig, config_hash, config_to_dict
from .fpmap import FingerprintMap, build_map, evaluate
from .gp_anomaly import DetectionJob, detect_abnormal, repair_abnormal
from .gridmap import BinaryGrid, DistanceImage, OccupancyGrid
from .pathplan import SurveyPlan, Waypoint, plan_survey
from .recovery import SvrParams, fit_all_regressors, recover_lost
from .rfsim import (
    BANDS, FLAG_LOST, FLAG_RESURVEYED, AccessPoint, FingerprintDatabase,
    LossModel, MotionParams, NoSojourn, PowerParams, RfWorld,
    ShadowFieldModel, Sojourn, TemporalModel, TimeEnergyReport, default_bands,
    simulate_survey,
)
from .segmentation import SegmentationParams, SegmentedMap, segment

# seed sub-stream tags
_SS_WORLD = 1
_SS_SURVEY = 2
_SS_RESURVEY = 3
_SS_EVAL = 4
_SS_BASELINE = 5


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


@dataclass
class RunManifest:
    config_hash: str
    stage_seconds: dict[str, float] = field(default_factory=dict)
    artifacts: dict[str, dict] = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def record(self, name: str, path: Path):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.artifacts[name] = {"path": str(path), "sha256": digest}

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)


class _Timer:
    def __init__(self, manifest: RunManifest, name: str):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.manifest.stage_seconds[self.name] = round(time.perf_counter() - self.t0, 4)


# ---------------------------------------------------------------------------
# Stage helpers (also used directly by the CLI subcommands)

def load_floor(cfg: PipelineConfig) -> tuple[OccupancyGrid, BinaryGrid, DistanceImage]:
    if cfg.map.path:
        occ = gridmap.load_grid(cfg.map.path)
    else:
        occ = fixtures.make_fixture(cfg.map.fixture, cfg.map.resolution_m)
    binary = gridmap.threshold_obstacles(occ, cfg.map.obstacle_threshold)
    inflated = gridmap.inflate_obstacles(binary, cfg.map.robot_radius_m)
    dist = gridmap.distance_transform(inflated)
    return occ, inflated, dist


def segment_floor(cfg: PipelineConfig, dist: DistanceImage) -> SegmentedMap:
    params = SegmentationParams(cfg.segmentation.quantization_m,
                                cfg.segmentation.overlap_threshold,
                                cfg.segmentation.value_tolerance_m)
    return segment(dist, params)


def make_world(cfg: PipelineConfig, inflated: BinaryGrid) -> RfWorld:
    w = cfg.world
    if w.ap_positions:
        positions = [tuple(map(float, p)) for p in w.ap_positions]
    else:
        rows, cols = np.where(inflated.free_mask)
        rng = _rng(cfg.seed, _SS_WORLD)
        idx = rng.choice(len(rows), size=w.n_aps, replace=False)
        positions = [inflated.pixel_to_world(int(c), int(r))
                     for r, c in zip(rows[idx], cols[idx])]
    aps = [AccessPoint(f"ap{i}", (round(p[0], 6), round(p[1], 6)),
                       default_bands(w.shadow_sigma_db))
           for i, p in enumerate(positions)]
    return RfWorld(
        aps,
        LossModel(w.p_floor, w.rssi_50_dbm, w.loss_slope_db),
        TemporalModel(w.mean_stable_s, w.epoch_shift_sigma_db),
        ShadowFieldModel(w.corr_length_m, w.rho, w.n_features),
        seed=cfg.seed,
    )


def motion_params(cfg: PipelineConfig) -> MotionParams:
    return MotionParams(cfg.motion.v_max_mps, cfg.motion.accel_mps2,
                        cfg.motion.turn_rate_rad_s)


def power_params(cfg: PipelineConfig) -> PowerParams:
    p = cfg.power
    return PowerParams(p.p_drive_w, p.p_idle_w, p.e_accel_wh, p.p_laser_w, p.p_laptop_w)


def svr_params(cfg: PipelineConfig) -> SvrParams:
    r = cfg.recovery
    return SvrParams(r.svr_c, r.epsilon_db, r.min_samples)


def resurvey_plan(plan: SurveyPlan, locations: list[tuple[float, float]],
                  start: tuple[float, float]) -> SurveyPlan:
    """Greedy tour over the abnormal locations, reusing their plan metadata."""
    by_key = {(round(w.x, 6), round(w.y, 6)): w for w in plan.waypoints}
    remaining = [loc for loc in locations if loc in by_key]
    pos = np.asarray(start, dtype=float)
    ordered: list[Waypoint] = []
    while remaining:
        dists = [float(np.hypot(l[0] - pos[0], l[1] - pos[1])) for l in remaining]
        k = int(np.argmin(dists))
        loc = remaining.pop(k)
        src = by_key[loc]
        ordered.append(Waypoint(src.region_id, len(ordered), loc[0], loc[1], src.heading))
        pos = np.asarray(loc)
    return SurveyPlan(ordered, sorted({w.region_id for w in ordered}), plan.cell_size)


def apply_resurvey(db: FingerprintDatabase, resurvey_db: FingerprintDatabase,
                   locations: list[tuple[float, float]]) -> FingerprintDatabase:
    """Replace abnormal-flagged rows with the stop-and-scan means."""
    loc_set = set(locations)
    fresh = {(s.key, s.ap_id, s.band): s for s in resurvey_db.samples}
    out = []
    for s in db.samples:
        if s.key in loc_set and s.flag == "abnormal":
            repl = fresh.get((s.key, s.ap_id, s.band))
            if repl is not None:
                flag = FLAG_RESURVEYED if repl.flag != FLAG_LOST else FLAG_LOST
                out.append(dataclasses.replace(s, rssi=repl.rssi, flag=flag, t=repl.t))
                continue
        out.append(s)
    return FingerprintDatabase(out, db.epoch)


def eval_trajectory(cfg: PipelineConfig, inflated: BinaryGrid) -> np.ndarray:
    rng = _rng(cfg.seed, _SS_EVAL)
    rows, cols = np.where(inflated.free_mask)
    idx = rng.choice(len(rows), size=cfg.localization.n_eval_points, replace=False)
    pts = [inflated.pixel_to_world(int(c), int(r)) for r, c in zip(rows[idx], cols[idx])]
    return np.array(pts)


# ---------------------------------------------------------------------------
# Full pipeline

@dataclass
class Prepared:
    """Geometry and world shared between pipeline variants of one seed."""

    inflated: BinaryGrid
    seg: SegmentedMap
    plan: SurveyPlan
    world: RfWorld


def prepare(cfg: PipelineConfig) -> Prepared:
    occ, inflated, dist = load_floor(cfg)
    seg = segment_floor(cfg, dist)
    plan = plan_survey(seg, inflated, cfg.plan.cell_size_m)
    world = make_world(cfg, inflated)
    return Prepared(inflated, seg, plan, world)


def run_pipeline(cfg: PipelineConfig, out_dir: str | Path | None = None,
                 prepared: Prepared | None = None) -> RunManifest:
    """Construction (epoch 0 style) or maintenance (previous_db set) run.

    Stages: segment -> plan -> fast survey -> lost-signal recovery ->
    abnormal detection -> repair (shift or simulated resurvey-with-sojourn)
    -> fingerprint map -> localization evaluation.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash(cfg))

    with _Timer(manifest, "segment"):
        if prepared is None:
            occ, inflated, dist = load_floor(cfg)
            seg = segment_floor(cfg, dist)
        else:
            inflated, seg = prepared.inflated, prepared.seg
    seg_json = {
        "regions": [{"id": r.id, "value_m": round(r.value, 4), "area_px": r.area_px}
                    for r in seg.regions],
    }
    (out / "segmented.json").write_text(json.dumps(seg_json, indent=1, sort_keys=True))
    manifest.record("segmented", out / "segmented.json")

    with _Timer(manifest, "plan"):
        plan = prepared.plan if prepared else plan_survey(seg, inflated, cfg.plan.cell_size_m)
    (out / "plan.jsonl").write_text(plan.to_jsonl())
    manifest.record("plan", out / "plan.jsonl")

    world = prepared.world if prepared else make_world(cfg, inflated)
    motion = motion_params(cfg)
    power = power_params(cfg)

    with _Timer(manifest, "survey"):
        db0, survey_report = simulate_survey(
            world, plan, NoSojourn(cfg.survey.scan_interval_s), motion,
            _rng(cfg.seed, _SS_SURVEY), power, epoch=cfg.epoch)
    (out / "db_raw.csv").write_text(db0.to_csv())
    manifest.record("db_raw", out / "db_raw.csv")

    with _Timer(manifest, "recover"):
        regressors = fit_all_regressors(db0, svr_params(cfg))
        db1 = recover_lost(db0, regressors)
    (out / "db_recovered.csv").write_text(db1.to_csv())
    manifest.record("db_recovered", out / "db_recovered.csv")

    with _Timer(manifest, "detect"):
        jobs = detect_abnormal(db1, t=cfg.gp.lnr_threshold)
    detect_json = [{
        "ap": j.ap_id, "band": j.band, "region": j.region_id,
        "iterations": j.report.iterations, "converged": j.report.converged,
        "hyper": {"sigma_f": round(j.report.hyper.sigma_f, 4),
                  "length_scale": round(j.report.hyper.length_scale, 4),
                  "noise_sigma": round(j.report.hyper.noise_sigma, 4)},
        "outliers": [{"x": loc[0], "y": loc[1]} for loc in j.outlier_locations],
    } for j in jobs]
    (out / "detect.json").write_text(json.dumps(detect_json, indent=1, sort_keys=True))
    manifest.record("detect", out / "detect.json")

    previous_db = None
    if cfg.previous_db:
        previous_db = FingerprintDatabase.from_csv(Path(cfg.previous_db).read_text())

    with _Timer(manifest, "repair"):
        db2, resurvey_locs = repair_abnormal(db1, jobs, previous_db, cfg.gp.min_shift_pairs)
        resurvey_report = None
        if resurvey_locs:
            last = plan.waypoints[-1]
            rplan = resurvey_plan(plan, resurvey_locs, (last.x, last.y))
            if rplan.waypoints:
                rdb, resurvey_report = simulate_survey(
                    world, rplan,
                    Sojourn(cfg.survey.dwell_s, cfg.survey.scans_per_stop,
                            cfg.survey.scan_interval_s),
                    motion, _rng(cfg.seed, _SS_RESURVEY), power,
                    epoch=cfg.epoch, t_start=survey_report.duration_s)
                db2 = apply_resurvey(db2, rdb, resurvey_locs)
    (out / "db_final.csv").write_text(db2.to_csv())
    manifest.record("db_final", out / "db_final.csv")
    (out / "resurvey.json").write_text(json.dumps({
        "locations": [{"x": l[0], "y": l[1]} for l in resurvey_locs],
        "report": resurvey_report.to_dict() if resurvey_report else None,
    }, indent=1, sort_keys=True))
    manifest.record("resurvey", out / "resurvey.json")

    with _Timer(manifest, "build_map"):
        grid_points = plan.positions()
        region_ids = np.array([w.region_id for w in plan.waypoints])
        ap_ids = [ap.id for ap in world.aps]
        fpmap = build_map(db2, grid_points, region_ids, ap_ids)
    (out / "map.csv").write_text(fpmap.to_csv())
    manifest.record("map", out / "map.csv")

    with _Timer(manifest, "eval"):
        traj = eval_trajectory(cfg, inflated)
        stats = evaluate(fpmap, world, traj, cfg.localization.method,
                         _rng(cfg.seed, _SS_EVAL + 100), epoch=cfg.epoch,
                         knn_k=cfg.localization.knn_k,
                         obs_noise_var=cfg.localization.obs_noise_var)
    total_duration = survey_report.duration_s + (
        resurvey_report.duration_s if resurvey_report else 0.0)
    total_wh = survey_report.total_wh + (resurvey_report.total_wh if resurvey_report else 0.0)
    manifest.stats = {
        "survey": survey_report.to_dict(),
        "resurvey": resurvey_report.to_dict() if resurvey_report else None,
        "n_resurvey_locations": len(resurvey_locs),
        "total_duration_s": round(total_duration, 3),
        "total_wh": round(total_wh, 4),
        "eval": stats.to_dict(),
        "n_waypoints": len(plan.waypoints),
        "n_regions": len(seg.regions),
    }
    (out / "eval.json").write_text(json.dumps(manifest.stats["eval"], indent=1, sort_keys=True))
    manifest.record("eval", out / "eval.json")
    cdf_lines = ["fraction,error_m"] + [
        f"{f:.2f},{v:.4f}" for f, v in zip(stats.cdf_fractions, stats.cdf_values)]
    (out / "cdf.csv").write_text("\n".join(cdf_lines) + "\n")
    manifest.record("cdf", out / "cdf.csv")

    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


@dataclass
class ComparisonReport:
    fast: dict
    baseline: dict
    duration_ratio: float
    energy_ratio: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)


def compare_modes(cfg: PipelineConfig, out_dir: str | Path | None = None) -> ComparisonReport:
    """Full fast pipeline vs stop-and-scan baseline on identical seeds.

    The baseline drives the same plan, dwells at every waypoint, averages the
    non-lost scans, and builds its map directly (no recovery or repair, which
    only exist to compensate the fast survey's single-scan fingerprints).
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    fast_manifest = run_pipeline(cfg, out / "fast")

    occ, inflated, dist = load_floor(cfg)
    seg = segment_floor(cfg, dist)
    plan = plan_survey(seg, inflated, cfg.plan.cell_size_m)
    world = make_world(cfg, inflated)
    base_db, base_report = simulate_survey(
        world, plan, Sojourn(cfg.survey.dwell_s, cfg.survey.scans_per_stop,
                             cfg.survey.scan_interval_s),
        motion_params(cfg), _rng(cfg.seed, _SS_BASELINE), power_params(cfg),
        epoch=cfg.epoch)
    (out / "baseline_db.csv").write_text(base_db.to_csv())

    grid_points = plan.positions()
    region_ids = np.array([w.region_id for w in plan.waypoints])
    base_map = build_map(base_db, grid_points, region_ids, [ap.id for ap in world.aps])
    traj = eval_trajectory(cfg, inflated)
    base_stats = evaluate(base_map, world, traj, cfg.localization.method,
                          _rng(cfg.seed, _SS_EVAL + 100), epoch=cfg.epoch,
                          knn_k=cfg.localization.knn_k,
                          obs_noise_var=cfg.localization.obs_noise_var)

    fast = {
        "duration_s": fast_manifest.stats["total_duration_s"],
        "total_wh": fast_manifest.stats["total_wh"],
        "eval": fast_manifest.stats["eval"],
        "n_resurvey_locations": fast_manifest.stats["n_resurvey_locations"],
    }
    baseline = {
        "duration_s": round(base_report.duration_s, 3),
        "total_wh": round(base_report.total_wh, 4),
        "eval": base_stats.to_dict(),
        "report": base_report.to_dict(),
    }
    report = ComparisonReport(
        fast, baseline,
        duration_ratio=round(fast["duration_s"] / baseline["duration_s"], 4),
        energy_ratio=round(fast["total_wh"] / baseline["total_wh"], 4),
    )
    (out / "compare.json").write_text(report.to_json())
    return report
