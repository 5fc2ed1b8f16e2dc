"""Lost-signal recovery from the paired band.

A single AP emits on both bands, and the difference between its 2.4 and
5 GHz RSSI at a location is a smooth function of position (the transmit
constants differ and the two path-loss exponents differ, so the gap grows
with log-distance) plus noise. We regress that difference on 2-D location
with an epsilon-insensitive RBF SVR per AP, then reconstruct a lost band
from the surviving one. When both bands are lost the location is
fingerprinted with the -100 dBm sentinel, which is itself informative:
simultaneous dual loss indicates a genuinely weak signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.svm import SVR

from .rfsim import (
    BAND_24, BAND_5, FLAG_LOST, FLAG_MEASURED, RSSI_MIN, RSSI_MAX,
    FLAG_RECOVERED_DUAL, FingerprintDatabase, FingerprintSample,
)

PREDICT_24_FROM_5 = "24from5"
PREDICT_5_FROM_24 = "5from24"


@dataclass
class SvrParams:
    c: float = 10.0
    # 0.5 dB tube: wide enough to ignore shadowing jitter, tight enough that
    # noise-free fits stay well under half a dB of held-out error
    epsilon_db: float = 0.5
    min_samples: int = 10
    kkt_tol: float = 1e-3


@dataclass
class DiffSample:
    location: tuple[float, float]
    delta_db: float  # rssi(2.4) - rssi(5)


@dataclass
class DiffRegressor:
    """Predicts the 2.4-minus-5 GHz RSSI difference at a 2-D location."""

    ap_id: str
    direction: str
    bias: float                      # constant fallback / mean delta
    model: SVR | None = None         # None -> constant predictor
    gamma: float = 0.0
    n_train: int = 0

    @property
    def is_constant(self) -> bool:
        return self.model is None

    def predict_delta(self, location) -> float:
        if self.model is None:
            return self.bias
        x = np.asarray(location, dtype=float).reshape(1, 2)
        return float(self.model.predict(x)[0])


def collect_diff_samples(db: FingerprintDatabase, ap_id: str) -> list[DiffSample]:
    """Band differences at every location where both bands were actually measured."""
    out = []
    for loc, per in db.by_location().items():
        s24 = per.get((ap_id, BAND_24))
        s5 = per.get((ap_id, BAND_5))
        if s24 is None or s5 is None:
            continue
        if s24.flag == FLAG_MEASURED and s5.flag == FLAG_MEASURED:
            out.append(DiffSample(loc, s24.rssi - s5.rssi))
    return out


def _median_heuristic_gamma(x: np.ndarray) -> float:
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    med = float(np.median(d[np.triu_indices(len(x), k=1)]))
    if med <= 0:
        return 0.0
    return 1.0 / (2.0 * med * med)


def _eps_loss(y_true: np.ndarray, y_pred: np.ndarray, eps: float) -> float:
    return float(np.maximum(np.abs(y_true - y_pred) - eps, 0.0).sum())


def fit_diff_regressor(samples: list[DiffSample], ap_id: str,
                       direction: str = PREDICT_24_FROM_5,
                       params: SvrParams | None = None) -> DiffRegressor:
    """RBF SVR over location -> band difference; constant-mean fallback.

    Falls back to the mean difference when there are fewer than
    params.min_samples training points, when the locations are degenerate,
    or when the fitted model is worse than the constant predictor under the
    epsilon-insensitive training loss.
    """
    params = params or SvrParams()
    if not samples:
        return DiffRegressor(ap_id, direction, 0.0)
    x = np.array([s.location for s in samples], dtype=float)
    y = np.array([s.delta_db for s in samples], dtype=float)
    bias = float(np.mean(y))
    if len(samples) < params.min_samples:
        return DiffRegressor(ap_id, direction, bias, n_train=len(samples))
    gamma = _median_heuristic_gamma(x)
    if gamma == 0.0:
        return DiffRegressor(ap_id, direction, bias, n_train=len(samples))
    model = SVR(kernel="rbf", C=params.c, epsilon=params.epsilon_db,
                gamma=gamma, tol=params.kkt_tol)
    model.fit(x, y)
    if _eps_loss(y, model.predict(x), params.epsilon_db) > \
            _eps_loss(y, np.full_like(y, bias), params.epsilon_db):
        return DiffRegressor(ap_id, direction, bias, n_train=len(samples))
    return DiffRegressor(ap_id, direction, bias, model, gamma, len(samples))


def fit_all_regressors(db: FingerprintDatabase, params: SvrParams | None = None,
                       ) -> dict[tuple[str, str], DiffRegressor]:
    """Both directions for every AP appearing in the database."""
    out: dict[tuple[str, str], DiffRegressor] = {}
    ap_ids = sorted({s.ap_id for s in db.samples})
    for ap_id in ap_ids:
        samples = collect_diff_samples(db, ap_id)
        for direction in (PREDICT_24_FROM_5, PREDICT_5_FROM_24):
            out[(ap_id, direction)] = fit_diff_regressor(samples, ap_id, direction, params)
    return out


def recover_lost(db: FingerprintDatabase,
                 regressors: dict[tuple[str, str], DiffRegressor]) -> FingerprintDatabase:
    """Fill single-band losses from the paired band; leave dual losses at -100.

    Measured rows are never touched; recovered rows are clamped to
    [-100, 0] and flagged. Applying twice is a no-op: recovered rows are no
    longer lost.
    """
    index = db.by_location()
    new_samples: list[FingerprintSample] = []
    for s in db.samples:
        if s.flag != FLAG_LOST:
            new_samples.append(s)
            continue
        other_band = BAND_5 if s.band == BAND_24 else BAND_24
        partner = index.get(s.key, {}).get((s.ap_id, other_band))
        if partner is None or partner.flag == FLAG_LOST:
            new_samples.append(s)  # dual loss: keep the -100 sentinel
            continue
        if s.band == BAND_24:
            reg = regressors.get((s.ap_id, PREDICT_24_FROM_5))
            value = partner.rssi + (reg.predict_delta(s.key) if reg else 0.0)
        else:
            reg = regressors.get((s.ap_id, PREDICT_5_FROM_24))
            value = partner.rssi - (reg.predict_delta(s.key) if reg else 0.0)
        value = float(np.clip(value, RSSI_MIN, RSSI_MAX))
        new_samples.append(replace(s, rssi=value, flag=FLAG_RECOVERED_DUAL))
    return FingerprintDatabase(new_samples, db.epoch)
