"""GP fingerprint map construction and online localization.

The map stores, for every reference grid point, the posterior mean and
variance of each AP-band RSSI, predicted by the per-(AP, band, region)
Gaussian process trained on the surveyed database. Localization matches an
observation vector against the map with a log-domain Bayes rule, a KNN
rule in RSSI space, or a particle filter over an observation sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gridmap import BinaryGrid
from .gp_anomaly import MIN_TRAIN, GpHyper, GpModel, fit_hyperparameters, gp_predict
from .rfsim import (BANDS, FLAG_MEASURED, RSSI_MAX, RSSI_MIN,
                    FingerprintDatabase, RfWorld, simulate_scan)

DEFAULT_KNN_K = 2


@dataclass
class FingerprintMap:
    grid_points: np.ndarray   # (m, 2) reference locations
    region_ids: np.ndarray    # (m,)
    ap_ids: list[str]
    means: np.ndarray         # (m, n_aps, 2) dBm
    variances: np.ndarray     # (m, n_aps, 2) dB^2
    imputed: np.ndarray       # (m, n_aps, 2) bool, True where no training data existed

    @property
    def n_points(self) -> int:
        return len(self.grid_points)

    def flat_means(self) -> np.ndarray:
        return self.means.reshape(self.n_points, -1)

    def flat_vars(self) -> np.ndarray:
        return self.variances.reshape(self.n_points, -1)

    def obs_vector(self, obs: "Observation") -> np.ndarray:
        """Dense observation vector over (ap, band), absent entries at -100 dBm."""
        vec = np.full(len(self.ap_ids) * len(BANDS), RSSI_MIN)
        index = {(ap, band): i * len(BANDS) + j
                 for i, ap in enumerate(self.ap_ids) for j, band in enumerate(BANDS)}
        for ap_id, band, rssi in obs.entries:
            pos = index.get((ap_id, band))
            if pos is not None:
                vec[pos] = rssi
        return vec

    def to_csv(self) -> str:
        lines = ["grid_x,grid_y,ap,band,mean_dbm,var_db2"]
        for p in range(self.n_points):
            x, y = self.grid_points[p]
            for i, ap in enumerate(self.ap_ids):
                for j, band in enumerate(BANDS):
                    lines.append(f"{x:.6f},{y:.6f},{ap},{band},"
                                 f"{self.means[p, i, j]:.4f},{self.variances[p, i, j]:.4f}")
        return "\n".join(lines) + "\n"


@dataclass
class Observation:
    entries: list[tuple[str, str, float]]  # (ap_id, band, rssi)

    def __post_init__(self):
        for _, _, rssi in self.entries:
            if not RSSI_MIN <= rssi <= RSSI_MAX:
                raise ValueError(f"rssi {rssi} outside [{RSSI_MIN}, {RSSI_MAX}]")


def build_map(db: FingerprintDatabase, grid_points: np.ndarray, region_ids: np.ndarray,
              ap_ids: list[str] | None = None,
              default_hyper: GpHyper | None = None) -> FingerprintMap:
    """Per-(AP, band, region) GP prediction at the region's grid points.

    Regions with no samples for an AP-band get the -100 dBm sentinel mean
    and the prior variance, flagged as imputed.
    """
    grid_points = np.asarray(grid_points, dtype=float)
    region_ids = np.asarray(region_ids)
    ap_ids = ap_ids if ap_ids is not None else sorted({s.ap_id for s in db.samples})
    default_hyper = default_hyper or GpHyper()
    m = len(grid_points)
    means = np.full((m, len(ap_ids), len(BANDS)), RSSI_MIN)
    variances = np.full((m, len(ap_ids), len(BANDS)),
                        default_hyper.sigma_f ** 2 + default_hyper.noise_sigma ** 2)
    imputed = np.ones((m, len(ap_ids), len(BANDS)), dtype=bool)

    for region in np.unique(region_ids):
        sel = np.where(region_ids == region)[0]
        pts = grid_points[sel]
        for i, ap_id in enumerate(ap_ids):
            for j, band in enumerate(BANDS):
                sub = db.filter(region_id=int(region), ap_id=ap_id, band=band)
                if not sub.samples:
                    continue
                x = np.array([s.location for s in sub.samples], dtype=float)
                y = np.array([s.rssi for s in sub.samples], dtype=float)
                if len(x) >= MIN_TRAIN:
                    hyper = fit_hyperparameters(x, y)
                else:
                    hyper = default_hyper
                model = GpModel(hyper, x, y)
                mu, var = gp_predict(model, pts)
                means[sel, i, j] = np.clip(mu, RSSI_MIN, RSSI_MAX)
                variances[sel, i, j] = var
                imputed[sel, i, j] = False
    return FingerprintMap(grid_points, region_ids, list(ap_ids), means, variances, imputed)


def _log_likelihoods(fpmap: FingerprintMap, obs: Observation,
                     obs_noise_var: float = 0.0) -> np.ndarray:
    """Per-grid-point sum of log Gaussian densities of the observation."""
    vec = fpmap.obs_vector(obs)
    mu = fpmap.flat_means()
    var = fpmap.flat_vars() + obs_noise_var
    return (-0.5 * np.log(2 * np.pi * var) - (vec - mu) ** 2 / (2 * var)).sum(axis=1)


def bayes_localize(fpmap: FingerprintMap, obs: Observation,
                   obs_noise_var: float = 0.0) -> tuple[float, float]:
    """Reference location maximizing the product of per-AP-band Gaussians."""
    ll = _log_likelihoods(fpmap, obs, obs_noise_var)
    j = int(np.argmax(ll))  # ties resolve to the lowest index
    return tuple(fpmap.grid_points[j])


def knn_localize(fpmap: FingerprintMap, obs: Observation, k: int = DEFAULT_KNN_K,
                 weighted: bool = False) -> tuple[float, float]:
    """Centroid of the K grid points nearest in RSSI-mean space."""
    if not 1 <= k <= fpmap.n_points:
        raise ValueError("k out of range")
    vec = fpmap.obs_vector(obs)
    d = np.linalg.norm(fpmap.flat_means() - vec, axis=1)
    order = np.argsort(d, kind="stable")[:k]
    pts = fpmap.grid_points[order]
    if weighted:
        w = 1.0 / np.maximum(d[order], 1e-9)
        return tuple((pts * w[:, None]).sum(0) / w.sum())
    return tuple(pts.mean(axis=0))


# ---------------------------------------------------------------------------
# Particle-filter refinement

@dataclass
class PfParams:
    n_particles: int = 300
    motion_std: float = 0.5      # m per step
    method: str = "bayes"        # "bayes" or "knn-snap"
    snap_sigma: float = 1.0      # m, kernel width for knn-snap weighting
    obs_noise_var: float = 0.0
    max_reject_tries: int = 20


@dataclass
class ParticleTrack:
    estimates: np.ndarray        # (T, 2)
    reinit_count: int


def _uniform_free_positions(grid: BinaryGrid, n: int, rng: np.random.Generator) -> np.ndarray:
    rows, cols = np.where(grid.free_mask)
    idx = rng.integers(len(rows), size=n)
    jitter = rng.uniform(-0.5, 0.5, size=(n, 2))
    xs = grid.origin[0] + (cols[idx] + jitter[:, 0]) * grid.resolution
    ys = grid.origin[1] + (rows[idx] + jitter[:, 1]) * grid.resolution
    return np.stack([xs, ys], axis=1)


def pf_track(fpmap: FingerprintMap, obs_sequence: list[Observation], grid: BinaryGrid,
             params: PfParams, rng: np.random.Generator) -> ParticleTrack:
    """Sequential importance resampling over an observation sequence.

    Predict adds isotropic Gaussian motion noise with obstacle rejection;
    update weights by the map likelihood at each particle's nearest grid
    point (or by distance to the KNN snap); systematic resampling triggers
    below half the effective sample size. Degenerate weights reinitialize
    the filter uniformly over free space.
    """
    n = params.n_particles
    if n < 100:
        raise ValueError("need at least 100 particles")
    particles = _uniform_free_positions(grid, n, rng)
    log_w = np.full(n, -math.log(n))
    estimates = []
    reinits = 0

    for obs in obs_sequence:
        # predict with obstacle rejection
        proposal = particles + rng.normal(0.0, params.motion_std, size=(n, 2))
        for i in range(n):
            tries = 0
            while not grid.is_free_world(proposal[i, 0], proposal[i, 1]):
                tries += 1
                if tries > params.max_reject_tries:
                    proposal[i] = particles[i]
                    break
                proposal[i] = particles[i] + rng.normal(0.0, params.motion_std, size=2)
        particles = proposal

        # update
        if params.method == "knn-snap":
            snap = np.asarray(knn_localize(fpmap, obs))
            d2 = ((particles - snap) ** 2).sum(axis=1)
            log_w = log_w - d2 / (2 * params.snap_sigma ** 2)
        else:
            ll = _log_likelihoods(fpmap, obs, params.obs_noise_var)
            nearest = np.argmin(
                ((fpmap.grid_points[None, :, :] - particles[:, None, :]) ** 2).sum(-1), axis=1)
            log_w = log_w + ll[nearest]

        log_w -= log_w.max()
        w = np.exp(log_w)
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            particles = _uniform_free_positions(grid, n, rng)
            log_w = np.full(n, -math.log(n))
            w = np.full(n, 1.0 / n)
            reinits += 1
        else:
            w /= total
        estimates.append((particles * w[:, None]).sum(axis=0))

        ess = 1.0 / (w ** 2).sum()
        if ess < n / 2:
            positions = np.cumsum(w)
            starts = (rng.random() + np.arange(n)) / n
            idx = np.searchsorted(positions, starts)
            particles = particles[np.minimum(idx, n - 1)].copy()
            log_w = np.full(n, -math.log(n))
    return ParticleTrack(np.array(estimates), reinits)


# ---------------------------------------------------------------------------
# Evaluation

@dataclass
class ErrorStats:
    errors_m: np.ndarray
    cdf_fractions: np.ndarray = field(init=False)
    cdf_values: np.ndarray = field(init=False)

    def __post_init__(self):
        self.errors_m = np.asarray(self.errors_m, dtype=float)
        self.cdf_fractions = np.linspace(0.01, 1.0, 100)
        self.cdf_values = np.quantile(self.errors_m, self.cdf_fractions)

    @property
    def mean_m(self) -> float:
        return float(self.errors_m.mean())

    @property
    def max_m(self) -> float:
        return float(self.errors_m.max())

    def to_dict(self) -> dict:
        return {"mean_m": round(self.mean_m, 4), "max_m": round(self.max_m, 4),
                "n": len(self.errors_m)}


def observation_from_scan(samples) -> Observation:
    """Keep only the received entries; lost ones fall back to the -100 fill."""
    entries = [(s.ap_id, s.band, s.rssi) for s in samples if s.flag == FLAG_MEASURED]
    return Observation(entries)


def evaluate(fpmap: FingerprintMap, world: RfWorld, trajectory: np.ndarray,
             method: str, rng: np.random.Generator, t0: float = 1.0e6,
             epoch: int = 0, knn_k: int = DEFAULT_KNN_K,
             obs_noise_var: float = 0.0) -> ErrorStats:
    """Draw fresh observations along a trajectory, localize, report errors."""
    errors = []
    for i, pos in enumerate(np.atleast_2d(trajectory)):
        scan = simulate_scan(world, pos, t0 + 173.0 * i, epoch, rng)
        obs = observation_from_scan(scan)
        if method == "knn":
            est = knn_localize(fpmap, obs, k=knn_k)
        else:
            est = bayes_localize(fpmap, obs, obs_noise_var)
        errors.append(float(np.hypot(est[0] - pos[0], est[1] - pos[1])))
    return ErrorStats(np.array(errors))
