"""Ground-truth dual-band RF world and the site-survey simulator.

The propagation model is log-distance path loss with shadowing: a lumped
transmit constant at the reference distance, a per-band path-loss exponent,
and a shadow term. Shadowing is a zero-mean Gaussian random field that is

- spatially correlated (squared-exponential covariance, configurable
  correlation length), realized with random Fourier features so any point
  can be evaluated lazily and deterministically from the world seed;
- piecewise-constant in time: the field redraws at renewal times with
  exponentially distributed stable durations (a measured WiFi RSSI stays
  stable for about a minute);
- shared between the 2.4 and 5 GHz bands through a common component with
  mixing rho, so paired band samples are strongly correlated.

Per-epoch offsets model the day-to-day drift of each AP-band. Signal loss
is Bernoulli per sample with a logistic probability in RSSI plus a floor.

Everything stochastic derives from (world seed, indices), so re-querying
the same sample is idempotent and surveys are reproducible bit-for-bit.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .pathplan import SurveyPlan, Waypoint

BAND_24 = "2.4"
BAND_5 = "5"
BANDS = (BAND_24, BAND_5)

RSSI_MIN = -100.0
RSSI_MAX = 0.0

FLAG_MEASURED = "measured"
FLAG_LOST = "lost"
FLAG_RECOVERED_DUAL = "recovered_dual"
FLAG_RECOVERED_SHIFT = "recovered_shift"
FLAG_RESURVEYED = "resurveyed"
FLAG_ABNORMAL = "abnormal"

# sub-stream tags for SeedSequence-derived generators
_STREAM_SHADOW = 101
_STREAM_RENEWAL = 102
_STREAM_EPOCH = 103

_SHARED_COMP = 0
_BAND_COMP = {BAND_24: 1, BAND_5: 2}


class EmptyPlan(ValueError):
    """Survey requested over a plan with no waypoints."""


@dataclass
class BandParams:
    tx_power_term: float      # dBm at the reference distance (lumped constant)
    beta: float               # path-loss exponent
    shadow_sigma: float = 4.0  # dB
    d0: float = 1.0           # reference distance, m

    def __post_init__(self):
        if self.beta <= 0 or self.shadow_sigma < 0 or self.d0 <= 0:
            raise ValueError("bad band parameters")


def default_bands(shadow_sigma: float = 4.0) -> dict[str, BandParams]:
    # 5 GHz starts lower and decays faster, so the band difference depends on distance
    return {
        BAND_24: BandParams(tx_power_term=-30.0, beta=2.8, shadow_sigma=shadow_sigma),
        BAND_5: BandParams(tx_power_term=-33.0, beta=3.2, shadow_sigma=shadow_sigma),
    }


@dataclass
class AccessPoint:
    id: str
    position: tuple[float, float]
    bands: dict[str, BandParams]

    def __post_init__(self):
        missing = [b for b in BANDS if b not in self.bands]
        if missing:
            raise ValueError(f"AP {self.id} missing band(s) {missing}")


@dataclass
class LossModel:
    p_floor: float = 0.02     # baseline random loss probability
    rssi_50: float = -88.0    # dBm at which loss probability reaches 50%
    slope: float = 3.0        # dB, logistic width

    def __post_init__(self):
        if not 0 <= self.p_floor < 1:
            raise ValueError("p_floor must be in [0, 1)")


@dataclass
class TemporalModel:
    mean_stable_s: float = 65.0
    epoch_shift_sigma: float = 2.0

    def __post_init__(self):
        if self.mean_stable_s <= 0:
            raise ValueError("mean_stable_s must be > 0")


@dataclass
class ShadowFieldModel:
    corr_length_m: float = 2.0
    rho: float = 0.9          # correlation between the two bands' shadow fields
    n_features: int = 64      # random Fourier features per field draw


class _RenewalClock:
    """Global renewal process: interval index of a time, lazily extended."""

    def __init__(self, seed: int, mean_stable_s: float):
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, _STREAM_RENEWAL]))
        self._mean = mean_stable_s
        self._bounds = [0.0]

    def interval_index(self, t: float) -> int:
        if t < 0:
            raise ValueError("t must be >= 0")
        while self._bounds[-1] <= t:
            self._bounds.append(self._bounds[-1] + self._rng.exponential(self._mean))
        return bisect.bisect_right(self._bounds, t) - 1


@dataclass
class RfWorld:
    aps: list[AccessPoint]
    loss: LossModel = field(default_factory=LossModel)
    temporal: TemporalModel = field(default_factory=TemporalModel)
    shadow: ShadowFieldModel = field(default_factory=ShadowFieldModel)
    seed: int = 0

    def __post_init__(self):
        self._ap_index = {ap.id: i for i, ap in enumerate(self.aps)}
        self._clock = _RenewalClock(self.seed, self.temporal.mean_stable_s)
        self._feature_cache: dict[tuple[int, int, int], tuple[np.ndarray, np.ndarray]] = {}

    def ap(self, ap_id: str) -> AccessPoint:
        return self.aps[self._ap_index[ap_id]]

    def _features(self, ap_idx: int, comp: int, interval: int) -> tuple[np.ndarray, np.ndarray]:
        key = (ap_idx, comp, interval)
        cached = self._feature_cache.get(key)
        if cached is None:
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, _STREAM_SHADOW, ap_idx, comp, interval]))
            m = self.shadow.n_features
            omega = rng.normal(0.0, 1.0 / self.shadow.corr_length_m, size=(m, 2))
            phi = rng.uniform(0.0, 2.0 * np.pi, size=m)
            cached = (omega, phi)
            self._feature_cache[key] = cached
        return cached

    def _unit_field(self, ap_idx: int, comp: int, interval: int, pos: np.ndarray) -> float:
        omega, phi = self._features(ap_idx, comp, interval)
        m = self.shadow.n_features
        return float(np.sqrt(2.0 / m) * np.cos(omega @ pos + phi).sum())

    def shadow_db(self, ap_id: str, band: str, pos, t: float) -> float:
        """Spatio-temporal shadow value, std = band's shadow_sigma."""
        ap_idx = self._ap_index[ap_id]
        sigma = self.ap(ap_id).bands[band].shadow_sigma
        if sigma == 0:
            return 0.0
        k = self._clock.interval_index(t)
        pos = np.asarray(pos, dtype=float)
        rho = self.shadow.rho
        shared = self._unit_field(ap_idx, _SHARED_COMP, k, pos)
        resid = self._unit_field(ap_idx, _BAND_COMP[band], k, pos)
        return sigma * (math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * resid)

    def epoch_shift_db(self, ap_id: str, band: str, epoch: int) -> float:
        """Per-epoch offset of an AP-band, drawn once from the world seed."""
        sigma = self.temporal.epoch_shift_sigma
        if sigma == 0:
            return 0.0
        ss = np.random.SeedSequence(
            [self.seed, _STREAM_EPOCH, self._ap_index[ap_id], _BAND_COMP[band], epoch])
        return float(np.random.default_rng(ss).normal(0.0, sigma))


def place_random_aps(free_positions: np.ndarray, n_aps: int, seed: int,
                     shadow_sigma: float = 4.0) -> list[AccessPoint]:
    """Drop n APs uniformly over candidate positions (e.g. free pixel centers)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    idx = rng.choice(len(free_positions), size=n_aps, replace=False)
    return [AccessPoint(f"ap{i}", tuple(np.round(free_positions[j], 6)), default_bands(shadow_sigma))
            for i, j in enumerate(idx)]


# ---------------------------------------------------------------------------
# Signal sampling

def rssi_mean(ap: AccessPoint, band: str, pos) -> float:
    """Deterministic part of the RSSI at pos: tx term minus log-distance decay."""
    p = ap.bands[band]
    d = float(np.hypot(pos[0] - ap.position[0], pos[1] - ap.position[1]))
    d = max(d, p.d0)
    return p.tx_power_term - 10.0 * p.beta * math.log10(d / p.d0)


def sample_rssi(world: RfWorld, ap: AccessPoint, band: str, pos,
                t: float = 0.0, epoch: int = 0) -> float:
    """One RSSI draw: mean + shadow(pos, t) + epoch shift, clamped to [-100, 0].

    All randomness is derived from the world seed, so the same arguments
    always reproduce the same value.
    """
    v = (rssi_mean(ap, band, pos)
         + world.shadow_db(ap.id, band, pos, t)
         + world.epoch_shift_db(ap.id, band, epoch))
    return float(np.clip(v, RSSI_MIN, RSSI_MAX))


def loss_probability(rssi: float, world: RfWorld) -> float:
    """Probability that a single band sample is lost, non-increasing in RSSI."""
    m = world.loss
    return float(m.p_floor + (1.0 - m.p_floor) * expit((m.rssi_50 - rssi) / m.slope))


@dataclass
class FingerprintSample:
    location: tuple[float, float]  # reference grid center, m
    region_id: int
    ap_id: str
    band: str
    rssi: float                    # dBm; -100 sentinel when lost
    flag: str
    t: float
    epoch: int

    @property
    def key(self) -> tuple[float, float]:
        return (round(self.location[0], 6), round(self.location[1], 6))


def simulate_scan(world: RfWorld, pos, t: float, epoch: int,
                  rng: np.random.Generator, region_id: int = -1,
                  location: tuple[float, float] | None = None) -> list[FingerprintSample]:
    """One full scan: a sample per (AP, band); each band lost independently.

    `pos` is where the radio actually is; `location` (default pos) is the
    reference point the samples are keyed to.
    """
    loc = tuple(pos) if location is None else tuple(location)
    out = []
    for ap in world.aps:
        for band in BANDS:
            rssi = sample_rssi(world, ap, band, pos, t, epoch)
            lost = rng.random() < loss_probability(rssi, world)
            out.append(FingerprintSample(
                loc, region_id, ap.id, band,
                RSSI_MIN if lost else rssi,
                FLAG_LOST if lost else FLAG_MEASURED, t, epoch))
    return out


# ---------------------------------------------------------------------------
# Fingerprint database

@dataclass
class FingerprintDatabase:
    samples: list[FingerprintSample]
    epoch: int = 0

    CSV_HEADER = "epoch,region_id,x_m,y_m,ap_id,band,rssi_dbm,flag,t_s"

    def by_location(self) -> dict[tuple[float, float], dict[tuple[str, str], FingerprintSample]]:
        out: dict[tuple[float, float], dict[tuple[str, str], FingerprintSample]] = {}
        for s in self.samples:
            out.setdefault(s.key, {})[(s.ap_id, s.band)] = s
        return out

    def locations(self) -> list[tuple[float, float]]:
        seen: dict[tuple[float, float], None] = {}
        for s in self.samples:
            seen.setdefault(s.key)
        return list(seen)

    def region_ids(self) -> list[int]:
        return sorted({s.region_id for s in self.samples})

    def filter(self, region_id: int | None = None, ap_id: str | None = None,
               band: str | None = None) -> "FingerprintDatabase":
        keep = [s for s in self.samples
                if (region_id is None or s.region_id == region_id)
                and (ap_id is None or s.ap_id == ap_id)
                and (band is None or s.band == band)]
        return FingerprintDatabase(keep, self.epoch)

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for s in self.samples:
            lines.append(f"{s.epoch},{s.region_id},{s.location[0]:.6f},{s.location[1]:.6f},"
                         f"{s.ap_id},{s.band},{s.rssi:.4f},{s.flag},{s.t:.3f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "FingerprintDatabase":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0] != cls.CSV_HEADER:
            raise ValueError("bad fingerprint CSV header")
        samples = []
        for ln in lines[1:]:
            ep, rid, x, y, ap, band, rssi, flag, t = ln.split(",")
            samples.append(FingerprintSample(
                (float(x), float(y)), int(rid), ap, band, float(rssi), flag,
                float(t), int(ep)))
        epoch = samples[0].epoch if samples else 0
        return cls(samples, epoch)


# ---------------------------------------------------------------------------
# Survey kinematics and energy

@dataclass
class MotionParams:
    v_max: float = 0.5        # m/s
    accel: float = 0.3        # m/s^2
    turn_rate: float = 0.8    # rad/s, in-place turning


@dataclass
class PowerParams:
    p_drive_w: float = 35.0   # motors while moving/turning
    p_idle_w: float = 10.0    # base electronics while stopped
    e_accel_wh: float = 0.05  # per deceleration/acceleration event
    p_laser_w: float = 8.0
    p_laptop_w: float = 35.0


@dataclass
class NoSojourn:
    scan_interval_s: float = 3.0


@dataclass
class Sojourn:
    dwell_s: float = 10.0
    scans_per_stop: int = 3
    scan_interval_s: float = 3.0


@dataclass
class TimeEnergyReport:
    duration_s: float
    robot_wh: float
    laser_wh: float
    laptop_wh: float
    n_decel_events: int
    distance_m: float

    @property
    def total_wh(self) -> float:
        return self.robot_wh + self.laser_wh + self.laptop_wh

    def to_dict(self) -> dict:
        return {
            "duration_s": round(self.duration_s, 3),
            "robot_wh": round(self.robot_wh, 4),
            "laser_wh": round(self.laser_wh, 4),
            "laptop_wh": round(self.laptop_wh, 4),
            "total_wh": round(self.total_wh, 4),
            "n_decel_events": self.n_decel_events,
            "distance_m": round(self.distance_m, 3),
        }


class _Move:
    """Rest-to-rest straight move with a trapezoidal (or triangular) profile."""

    def __init__(self, t0: float, p0: np.ndarray, p1: np.ndarray, motion: MotionParams):
        self.t0 = t0
        self.p0 = p0
        self.length = float(np.linalg.norm(p1 - p0))
        self.direction = (p1 - p0) / self.length if self.length > 0 else np.zeros(2)
        a, v = motion.accel, motion.v_max
        if self.length >= v * v / a:
            self.v_peak = v
            self.t_acc = v / a
            self.t_cruise = (self.length - v * v / a) / v
        else:
            self.v_peak = math.sqrt(self.length * a)
            self.t_acc = self.v_peak / a
            self.t_cruise = 0.0
        self.accel = a
        self.duration = 2 * self.t_acc + self.t_cruise

    def pos_at(self, t: float) -> np.ndarray:
        dt = min(max(t - self.t0, 0.0), self.duration)
        a = self.accel
        if dt <= self.t_acc:
            s = 0.5 * a * dt * dt
        elif dt <= self.t_acc + self.t_cruise:
            s = 0.5 * a * self.t_acc ** 2 + self.v_peak * (dt - self.t_acc)
        else:
            r = self.duration - dt
            s = self.length - 0.5 * a * r * r
        return self.p0 + s * self.direction


class _Timeline:
    """Sequence of moves and pauses; supports position lookup at any time."""

    def __init__(self):
        self.moves: list[_Move] = []
        self.pauses: list[tuple[float, float, np.ndarray]] = []  # (t0, t1, pos)
        self.t = 0.0
        self.move_time = 0.0
        self.turn_time = 0.0
        self.dwell_time = 0.0
        self.distance = 0.0
        self.pos = None

    def add_move(self, p1: np.ndarray, motion: MotionParams):
        p1 = np.asarray(p1, dtype=float)
        if self.pos is None:
            self.pos = p1
            return
        if np.allclose(p1, self.pos):
            return
        mv = _Move(self.t, self.pos, p1, motion)
        self.moves.append(mv)
        self.t += mv.duration
        self.move_time += mv.duration
        self.distance += mv.length
        self.pos = p1

    def add_pause(self, seconds: float, kind: str):
        if seconds <= 0:
            return
        self.pauses.append((self.t, self.t + seconds, self.pos.copy()))
        self.t += seconds
        if kind == "turn":
            self.turn_time += seconds
        else:
            self.dwell_time += seconds

    def pos_at(self, t: float) -> np.ndarray:
        lo, hi = 0, len(self.moves)
        # moves are time-ordered; binary search the covering move
        while lo < hi:
            mid = (lo + hi) // 2
            if self.moves[mid].t0 + self.moves[mid].duration < t:
                lo = mid + 1
            else:
                hi = mid
        if lo < len(self.moves) and self.moves[lo].t0 <= t:
            return self.moves[lo].pos_at(t)
        if lo > 0:
            prev = self.moves[lo - 1]
            return prev.pos_at(prev.t0 + prev.duration)
        return self.moves[0].p0 if self.moves else self.pos


def _heading(p0: np.ndarray, p1: np.ndarray) -> float:
    return math.atan2(p1[1] - p0[1], p1[0] - p0[0])


def _turn_seconds(h0: float, h1: float, motion: MotionParams) -> float:
    d = abs(math.remainder(h1 - h0, 2 * math.pi))
    return d / motion.turn_rate if motion.turn_rate > 0 else 0.0


def _collinear_sections(points: np.ndarray) -> list[tuple[int, int]]:
    """Split a polyline into maximal straight sections; returns index ranges."""
    sections = []
    start = 0
    i = 1
    while i < len(points):
        j = i
        d0 = None
        while j < len(points):
            seg = points[j] - points[j - 1]
            n = np.linalg.norm(seg)
            if n == 0:
                j += 1
                continue
            d = seg / n
            if d0 is None:
                d0 = d
            elif not np.allclose(d, d0, atol=1e-9):
                break
            j += 1
        sections.append((start, j - 1))
        start = j - 1
        i = j
    return sections


def build_timeline(plan: SurveyPlan, mode, motion: MotionParams,
                   t_start: float = 0.0) -> _Timeline:
    """Motion timeline of a survey: straight sections driven rest-to-rest,
    in-place turns between sections, dwell stops at waypoints when sojourning."""
    if not plan.waypoints:
        raise EmptyPlan("survey plan has no waypoints")
    pts = plan.positions()
    tl = _Timeline()
    tl.t = t_start
    tl.pos = pts[0].copy()
    heading = None

    if isinstance(mode, Sojourn):
        stop = max(mode.dwell_s, (mode.scans_per_stop - 1) * mode.scan_interval_s)
        tl.add_pause(stop, "dwell")
        for i in range(1, len(pts)):
            h = _heading(pts[i - 1], pts[i])
            if heading is not None:
                tl.add_pause(_turn_seconds(heading, h, motion), "turn")
            heading = h
            tl.add_move(pts[i], motion)
            tl.add_pause(stop, "dwell")
    else:
        for a, b in _collinear_sections(pts):
            if b <= a:
                continue
            h = _heading(pts[a], pts[b])
            if heading is not None:
                tl.add_pause(_turn_seconds(heading, h, motion), "turn")
            heading = h
            tl.add_move(pts[b], motion)
    return tl


def _energy_report(tl: _Timeline, power: PowerParams, n_decel: int,
                   t_start: float) -> TimeEnergyReport:
    duration = tl.t - t_start
    return TimeEnergyReport(
        duration_s=duration,
        robot_wh=(power.p_drive_w * (tl.move_time + tl.turn_time)
                  + power.p_idle_w * tl.dwell_time) / 3600.0
                 + power.e_accel_wh * n_decel,
        laser_wh=power.p_laser_w * duration / 3600.0,
        laptop_wh=power.p_laptop_w * duration / 3600.0,
        n_decel_events=n_decel,
        distance_m=tl.distance,
    )


def simulate_survey(world: RfWorld, plan: SurveyPlan, mode, motion: MotionParams,
                    rng: np.random.Generator, power: PowerParams | None = None,
                    epoch: int = 0, t_start: float = 0.0,
                    ) -> tuple[FingerprintDatabase, TimeEnergyReport]:
    """Drive the plan in the given mode and collect a fingerprint database.

    Without sojourn the robot cruises through each straight section and scans
    on a fixed interval; every scan is drawn at the robot's interpolated
    position and keyed to the nearest waypoint, keeping the spatially closest
    scan per waypoint (ties: earliest). With sojourn the robot stops at every
    waypoint and records the per-band mean of the non-lost scans taken there.
    """
    power = power or PowerParams()
    if not plan.waypoints:
        raise EmptyPlan("survey plan has no waypoints")
    tl = build_timeline(plan, mode, motion, t_start)
    samples: list[FingerprintSample] = []

    if isinstance(mode, Sojourn):
        # scans happen during each dwell pause
        wp_iter = iter(plan.waypoints)
        for (t0, t1, pos) in tl.pauses:
            if t1 - t0 < mode.dwell_s - 1e-9:  # turn pause
                continue
            wp = next(wp_iter)
            scans = []
            for i in range(mode.scans_per_stop):
                t = t0 + i * mode.scan_interval_s
                scans.append(simulate_scan(world, pos, t, epoch, rng,
                                           region_id=wp.region_id,
                                           location=(wp.x, wp.y)))
            for j in range(len(scans[0])):
                per_band = [sc[j] for sc in scans]
                ok = [s.rssi for s in per_band if s.flag == FLAG_MEASURED]
                proto = per_band[0]
                if ok:
                    samples.append(replace(proto, rssi=float(np.mean(ok)), flag=FLAG_MEASURED))
                else:
                    samples.append(replace(proto, rssi=RSSI_MIN, flag=FLAG_LOST))
        n_decel = len(tl.moves)
    else:
        duration = tl.t - t_start
        n_scans = int(duration / mode.scan_interval_s) + 1
        wp_xy = plan.positions()
        best: dict[int, tuple[float, float, np.ndarray]] = {}  # wp index -> (dist, t, pos)
        for i in range(n_scans):
            t = t_start + i * mode.scan_interval_s
            pos = tl.pos_at(t)
            d2 = np.sum((wp_xy - pos) ** 2, axis=1)
            j = int(np.argmin(d2))
            cand = (float(np.sqrt(d2[j])), t, pos)
            if j not in best or (cand[0], cand[1]) < (best[j][0], best[j][1]):
                best[j] = cand
        for j in sorted(best):
            dist, t, pos = best[j]
            wp = plan.waypoints[j]
            samples.extend(simulate_scan(world, pos, t, epoch, rng,
                                         region_id=wp.region_id,
                                         location=(wp.x, wp.y)))
        n_decel = len(tl.moves)

    report = _energy_report(tl, power, n_decel, t_start)
    return FingerprintDatabase(samples, epoch), report
