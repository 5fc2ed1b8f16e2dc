"""Gaussian-process modeling of per-AP RSSI fields and abnormal-sample repair.

Signal strength is spatially smooth (log-distance propagation), so a GP
with a squared-exponential kernel fits each (AP, band, region) field and
flags samples that disagree with it. Detection is the classic largest
normalized residual loop: predict the training set on itself, standardize
the residuals with the predictive variance, and while the largest
|residual| exceeds the threshold remove that single sample and refit.

Flagged samples are repaired either from the previous survey epoch (the
field drifts roughly as a per-AP constant shift over days) or, when no
usable history exists, by marking the location for a stop-and-scan
resurvey.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .rfsim import (
    FLAG_ABNORMAL, FLAG_LOST, FLAG_RECOVERED_SHIFT, RSSI_MAX, RSSI_MIN,
    FingerprintDatabase, FingerprintSample,
)

LNR_THRESHOLD = 1.96
MIN_TRAIN = 5

MEAN_ZERO = "zero"
MEAN_TRAIN = "train_mean"


class TooFewSamples(ValueError):
    pass


class NoShiftAvailable(ValueError):
    """Not enough co-located clean pairs across epochs to estimate a shift."""


@dataclass
class GpHyper:
    sigma_f: float = 6.0       # signal std, dB
    length_scale: float = 2.0  # m
    noise_sigma: float = 3.0   # dB

    def __post_init__(self):
        if min(self.sigma_f, self.length_scale, self.noise_sigma) <= 0:
            raise ValueError("GP hyperparameters must be > 0")


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def se_kernel(a: np.ndarray, b: np.ndarray, hyper: GpHyper) -> np.ndarray:
    """k(x, x') = sigma_f^2 * exp(-||x - x'||^2 / (2 l^2))."""
    return hyper.sigma_f ** 2 * np.exp(-_sq_dists(a, b) / (2.0 * hyper.length_scale ** 2))


@dataclass
class GpModel:
    hyper: GpHyper
    train_x: np.ndarray             # (n, 2) m
    train_y: np.ndarray             # (n,) dBm
    mean_mode: str = MEAN_TRAIN
    jitter: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.train_x = np.asarray(self.train_x, dtype=float)
        self.train_y = np.asarray(self.train_y, dtype=float)
        self.y_mean = float(self.train_y.mean()) if self.mean_mode == MEAN_TRAIN else 0.0
        n = len(self.train_x)
        k = se_kernel(self.train_x, self.train_x, self.hyper)
        k[np.diag_indices(n)] += self.hyper.noise_sigma ** 2
        jitter = 0.0
        while True:
            try:
                self._factor = cho_factor(k + jitter * np.eye(n), lower=True)
                break
            except np.linalg.LinAlgError:
                jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
                if jitter > 1.0:
                    raise
        self.jitter = jitter
        self._alpha = cho_solve(self._factor, self.train_y - self.y_mean)

    @property
    def n(self) -> int:
        return len(self.train_x)

    def log_marginal_likelihood(self) -> float:
        y = self.train_y - self.y_mean
        half_logdet = float(np.sum(np.log(np.diag(self._factor[0]))))
        return float(-0.5 * y @ self._alpha - half_logdet - 0.5 * self.n * math.log(2 * math.pi))


def gp_predict(model: GpModel, x_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior predictive mean and variance (noise included) at x_star."""
    x_star = np.atleast_2d(np.asarray(x_star, dtype=float))
    k_star = se_kernel(x_star, model.train_x, model.hyper)
    mu = model.y_mean + k_star @ model._alpha
    v = cho_solve(model._factor, k_star.T)
    var = (model.hyper.sigma_f ** 2 + model.hyper.noise_sigma ** 2
           - np.einsum("ij,ji->i", k_star, v))
    return mu, np.maximum(var, 1e-12)


_SIGMA_F_GRID = np.geomspace(2.0, 12.0, 5)
_LENGTH_GRID = np.geomspace(0.8, 8.0, 5)
_NOISE_GRID = np.geomspace(1.0, 6.0, 4)


def _robust_keep_mask(x: np.ndarray, y: np.ndarray, k: int = 6, c: float = 4.0) -> np.ndarray:
    """Crude gross-error screen: compare each sample against its k-NN median.

    Without this, a few 10+ dB errors drag the likelihood fit toward a tiny
    length scale that interpolates them, and the residual test goes blind.
    Only the hyperparameter fit uses the mask; detection still sees all data.
    """
    n = len(x)
    if n <= k + 1:
        return np.ones(n, dtype=bool)
    d2 = _sq_dists(x, x)
    np.fill_diagonal(d2, np.inf)
    nn = np.argsort(d2, axis=1)[:, :k]
    resid = y - np.median(y[nn], axis=1)
    med = np.median(resid)
    mad = 1.4826 * np.median(np.abs(resid - med)) + 1e-6
    return np.abs(resid - med) <= c * mad


def fit_hyperparameters(train_x: np.ndarray, train_y: np.ndarray,
                        mean_mode: str = MEAN_TRAIN) -> GpHyper:
    """Maximize the log marginal likelihood over a coarse log-grid, then refine.

    The fit runs on a gross-error-trimmed subset so isolated spikes cannot
    steer it; the returned point is never worse than any grid point (on that
    subset). With fewer than MIN_TRAIN samples the defaults are returned.
    """
    train_x = np.asarray(train_x, dtype=float)
    train_y = np.asarray(train_y, dtype=float)
    if len(train_x) < MIN_TRAIN:
        return GpHyper()
    keep = _robust_keep_mask(train_x, train_y)
    if keep.sum() >= MIN_TRAIN:
        train_x, train_y = train_x[keep], train_y[keep]
    y = train_y - train_y.mean() if mean_mode == MEAN_TRAIN else train_y
    n = len(train_x)
    sq = _sq_dists(train_x, train_x)

    def lml(sf, ls, ns):
        k = sf * sf * np.exp(-sq / (2.0 * ls * ls))
        k[np.diag_indices(n)] += ns * ns
        try:
            factor = cho_factor(k, lower=True)
        except np.linalg.LinAlgError:
            return -np.inf
        alpha = cho_solve(factor, y)
        return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(factor[0])))
                     - 0.5 * n * math.log(2 * math.pi))

    best = (-np.inf, None)
    for sf in _SIGMA_F_GRID:
        for ls in _LENGTH_GRID:
            for ns in _NOISE_GRID:
                v = lml(sf, ls, ns)
                if v > best[0]:
                    best = (v, (sf, ls, ns))
    score, (sf, ls, ns) = best
    # local coordinate refinement, clamped to the grid's bounding box so the
    # noise floor cannot collapse toward interpolation
    bounds = [(_SIGMA_F_GRID[0], _SIGMA_F_GRID[-1]),
              (_LENGTH_GRID[0], _LENGTH_GRID[-1]),
              (_NOISE_GRID[0], _NOISE_GRID[-1])]
    params = [sf, ls, ns]
    step = 1.4
    for _ in range(3):
        improved_any = False
        for i in range(3):
            for factor in (step, 1.0 / step):
                cand = params.copy()
                cand[i] = min(max(cand[i] * factor, bounds[i][0]), bounds[i][1])
                v = lml(*cand)
                if v > score:
                    score, params = v, cand
                    improved_any = True
        if not improved_any:
            step = math.sqrt(step)
    return GpHyper(*params)


def normalized_residuals(model: GpModel) -> np.ndarray:
    """(y - mu*) / sqrt(var*) with the training set predicted on itself."""
    mu, var = gp_predict(model, model.train_x)
    return (model.train_y - mu) / np.sqrt(var)


@dataclass
class ResidualReport:
    outlier_indices: list[int]      # original indices, in removal order
    residuals: np.ndarray           # final residuals of the retained samples
    retained_indices: np.ndarray    # original indices of retained samples
    iterations: int
    converged: bool
    hyper: GpHyper


def lnr_detect(train_x: np.ndarray, train_y: np.ndarray, t: float = LNR_THRESHOLD,
               max_iter: int | None = None, hyper: GpHyper | None = None,
               mean_mode: str = MEAN_TRAIN) -> ResidualReport:
    """Iterative largest-normalized-residual test.

    Hyperparameters are fitted once on the initial set and frozen; each
    iteration refits the GP on the reduced set, removes the single sample
    with the largest |normalized residual| above t (ties: lowest index) and
    repeats until all residuals pass, fewer than MIN_TRAIN samples remain,
    or the removal budget (default 30% of n) is exhausted.
    """
    train_x = np.asarray(train_x, dtype=float)
    train_y = np.asarray(train_y, dtype=float)
    n = len(train_x)
    if n < MIN_TRAIN:
        raise TooFewSamples(f"need >= {MIN_TRAIN} samples, got {n}")
    if max_iter is None:
        max_iter = max(1, int(0.3 * n))
    if hyper is None:
        hyper = fit_hyperparameters(train_x, train_y, mean_mode)

    keep = np.arange(n)
    outliers: list[int] = []
    iterations = 0
    converged = False
    while True:
        model = GpModel(hyper, train_x[keep], train_y[keep], mean_mode)
        r = normalized_residuals(model)
        iterations += 1
        worst = int(np.argmax(np.abs(r)))  # argmax returns the lowest index on ties
        if abs(r[worst]) <= t:
            converged = True
            break
        outliers.append(int(keep[worst]))
        keep = np.delete(keep, worst)
        if len(outliers) >= max_iter or len(keep) < MIN_TRAIN:
            model = GpModel(hyper, train_x[keep], train_y[keep], mean_mode)
            r = normalized_residuals(model)
            converged = bool(np.max(np.abs(r)) <= t)
            break
    return ResidualReport(outliers, r, keep, iterations, converged, hyper)


# ---------------------------------------------------------------------------
# Repair

@dataclass
class ShiftEstimate:
    ap_id: str
    band: str
    region_id: int
    shift_db: float
    n_pairs: int


def estimate_shift(current_clean: FingerprintDatabase, previous_db: FingerprintDatabase,
                   ap_id: str, band: str, region_id: int,
                   min_pairs: int = 5) -> ShiftEstimate:
    """Median of (current - previous) over co-located clean samples of one AP-band."""
    cur = current_clean.filter(region_id=region_id, ap_id=ap_id, band=band)
    prev = previous_db.filter(region_id=region_id, ap_id=ap_id, band=band)
    prev_index = {s.key: s for s in prev.samples if s.flag != FLAG_LOST}
    diffs = []
    for s in cur.samples:
        if s.flag == FLAG_LOST:
            continue
        p = prev_index.get(s.key)
        if p is not None:
            diffs.append(s.rssi - p.rssi)
    if len(diffs) < min_pairs:
        raise NoShiftAvailable(
            f"{ap_id}/{band}/region {region_id}: {len(diffs)} pairs < {min_pairs}")
    return ShiftEstimate(ap_id, band, region_id, float(np.median(diffs)), len(diffs))


@dataclass
class DetectionJob:
    """LNR result for one (AP, band, region) slice of the database."""

    ap_id: str
    band: str
    region_id: int
    locations: list[tuple[float, float]]  # training locations, db order
    report: ResidualReport

    @property
    def outlier_locations(self) -> list[tuple[float, float]]:
        return [self.locations[i] for i in self.report.outlier_indices]


def detect_abnormal(db: FingerprintDatabase, t: float = LNR_THRESHOLD,
                    mean_mode: str = MEAN_TRAIN) -> list[DetectionJob]:
    """Run the LNR loop per (AP, band, region); slices smaller than MIN_TRAIN are skipped."""
    jobs: list[DetectionJob] = []
    ap_ids = sorted({s.ap_id for s in db.samples})
    bands = sorted({s.band for s in db.samples})
    for region_id in db.region_ids():
        for ap_id in ap_ids:
            for band in bands:
                sub = db.filter(region_id=region_id, ap_id=ap_id, band=band)
                if len(sub.samples) < MIN_TRAIN:
                    continue
                x = np.array([s.location for s in sub.samples])
                y = np.array([s.rssi for s in sub.samples])
                report = lnr_detect(x, y, t=t, mean_mode=mean_mode)
                jobs.append(DetectionJob(ap_id, band, region_id,
                                         [s.key for s in sub.samples], report))
    return jobs


def repair_abnormal(db: FingerprintDatabase, jobs: list[DetectionJob],
                    previous_db: FingerprintDatabase | None = None,
                    min_pairs: int = 5,
                    ) -> tuple[FingerprintDatabase, list[tuple[float, float]]]:
    """Apply the repair branch to every detected outlier.

    Maintenance (previous epoch available and a shift is estimable): the
    sample becomes previous value + per-(AP, band, region) shift. Otherwise
    the location joins the resurvey list and the sample is flagged abnormal
    until the resurvey harness replaces it. Samples outside the outlier sets
    are never modified.
    """
    affected: dict[tuple[tuple[float, float], str, str], str | float] = {}
    resurvey: dict[tuple[float, float], None] = {}

    prev_index: dict[tuple[tuple[float, float], str, str], FingerprintSample] = {}
    if previous_db is not None:
        for s in previous_db.samples:
            prev_index[(s.key, s.ap_id, s.band)] = s

    for job in jobs:
        if not job.report.outlier_indices:
            continue
        shift = None
        if previous_db is not None:
            clean = FingerprintDatabase(
                [s for i, s in enumerate(db.filter(
                    region_id=job.region_id, ap_id=job.ap_id, band=job.band).samples)
                 if i in set(job.report.retained_indices)], db.epoch)
            try:
                shift = estimate_shift(clean, previous_db, job.ap_id, job.band,
                                       job.region_id, min_pairs)
            except NoShiftAvailable:
                shift = None
        for loc in job.outlier_locations:
            key = (loc, job.ap_id, job.band)
            prev = prev_index.get(key)
            if shift is not None and prev is not None and prev.flag != FLAG_LOST:
                affected[key] = float(np.clip(prev.rssi + shift.shift_db, RSSI_MIN, RSSI_MAX))
            else:
                affected[key] = FLAG_ABNORMAL
                resurvey.setdefault(loc)

    new_samples = []
    for s in db.samples:
        key = (s.key, s.ap_id, s.band)
        action = affected.get(key)
        if action is None:
            new_samples.append(s)
        elif action == FLAG_ABNORMAL:
            new_samples.append(replace(s, flag=FLAG_ABNORMAL))
        else:
            new_samples.append(replace(s, rssi=action, flag=FLAG_RECOVERED_SHIFT))
    return FingerprintDatabase(new_samples, db.epoch), list(resurvey)
