import numpy as np
import pytest

from wifisurvey.rfsim import (
    BAND_24, BAND_5, FLAG_LOST, FLAG_MEASURED, FLAG_RECOVERED_DUAL,
    AccessPoint, FingerprintDatabase, FingerprintSample, LossModel, RfWorld,
    default_bands, rssi_mean, sample_rssi,
)
from wifisurvey.recovery import (
    PREDICT_24_FROM_5, PREDICT_5_FROM_24, DiffSample, SvrParams,
    collect_diff_samples, fit_all_regressors, fit_diff_regressor, recover_lost,
)


def sample(loc, ap, band, rssi, flag=FLAG_MEASURED, region=0):
    return FingerprintSample(loc, region, ap, band, rssi, flag, 0.0, 0)


def dual_rows(loc, ap, r24, r5, f24=FLAG_MEASURED, f5=FLAG_MEASURED):
    return [sample(loc, ap, BAND_24, r24, f24), sample(loc, ap, BAND_5, r5, f5)]


def test_collect_empty_when_no_dual_measured():
    rows = dual_rows((0, 0), "ap0", -100.0, -60.0, f24=FLAG_LOST)
    db = FingerprintDatabase(rows)
    assert collect_diff_samples(db, "ap0") == []


def test_collect_all_dual_measured():
    rows = []
    for i in range(5):
        rows += dual_rows((float(i), 0.0), "ap0", -50.0 - i, -55.0 - 2 * i)
    db = FingerprintDatabase(rows)
    got = collect_diff_samples(db, "ap0")
    assert len(got) == 5
    assert sorted(s.delta_db for s in got) == sorted(5.0 + i for i in range(5))


def test_collect_mixed_matches_row_scan_oracle():
    rng = np.random.default_rng(0)
    rows = []
    expected = 0
    for i in range(60):
        loc = (float(i % 10), float(i // 10))
        lost24 = rng.random() < 0.3
        lost5 = rng.random() < 0.3
        rows += dual_rows(loc, "ap0",
                          -100.0 if lost24 else -50.0, -100.0 if lost5 else -60.0,
                          f24=FLAG_LOST if lost24 else FLAG_MEASURED,
                          f5=FLAG_LOST if lost5 else FLAG_MEASURED)
        if not lost24 and not lost5:
            expected += 1
    got = collect_diff_samples(FingerprintDatabase(rows), "ap0")
    assert len(got) == expected


def test_fit_constant_delta():
    samples = [DiffSample((float(i), float(j)), 4.0) for i in range(5) for j in range(4)]
    reg = fit_diff_regressor(samples, "ap0")
    for loc in [(0.0, 0.0), (2.5, 1.5), (4.0, 3.0)]:
        assert reg.predict_delta(loc) == pytest.approx(4.0, abs=1.0)  # within epsilon tube


def test_fit_too_few_samples_falls_back():
    samples = [DiffSample((0.0, 0.0), 2.0), DiffSample((1.0, 0.0), 4.0),
               DiffSample((2.0, 0.0), 6.0)]
    reg = fit_diff_regressor(samples, "ap0")
    assert reg.is_constant
    assert reg.bias == pytest.approx(4.0)
    assert reg.predict_delta((9.0, 9.0)) == pytest.approx(4.0)


def test_fit_recovers_distance_law():
    # noise-free difference from the dual-band propagation law along a transect
    ap = AccessPoint("ap0", (0.0, 0.0), default_bands(0.0))
    xs = np.linspace(1.0, 50.0, 50)
    samples = [DiffSample((x, 0.0), rssi_mean(ap, BAND_24, (x, 0.0)) - rssi_mean(ap, BAND_5, (x, 0.0)))
               for x in xs]
    reg = fit_diff_regressor(samples, "ap0")
    held_out = np.linspace(1.5, 49.5, 49)
    errs = [reg.predict_delta((x, 0.0))
            - (rssi_mean(ap, BAND_24, (x, 0.0)) - rssi_mean(ap, BAND_5, (x, 0.0)))
            for x in held_out]
    rmse = float(np.sqrt(np.mean(np.square(errs))))
    assert rmse <= 0.5


def test_fit_never_worse_than_constant_on_training_loss():
    rng = np.random.default_rng(7)
    samples = [DiffSample((rng.uniform(0, 20), rng.uniform(0, 20)), rng.normal(3.0, 2.0))
               for _ in range(40)]
    reg = fit_diff_regressor(samples, "ap0")
    x = np.array([s.location for s in samples])
    y = np.array([s.delta_db for s in samples])
    pred = np.array([reg.predict_delta(loc) for loc in x])
    eps = SvrParams().epsilon_db
    loss_fit = np.maximum(np.abs(y - pred) - eps, 0).sum()
    loss_const = np.maximum(np.abs(y - y.mean()) - eps, 0).sum()
    assert loss_fit <= loss_const + 1e-9


def test_recover_no_lost_rows_identity():
    rows = dual_rows((0.0, 0.0), "ap0", -50.0, -55.0)
    db = FingerprintDatabase(rows)
    out = recover_lost(db, fit_all_regressors(db))
    assert out.to_csv() == db.to_csv()


def test_recover_single_band_arithmetic():
    # training data says delta = +4 dB everywhere; 2.4 lost at one location
    rows = []
    for i in range(12):
        rows += dual_rows((float(i), 0.0), "ap0", -56.0, -60.0)
    rows += dual_rows((20.0, 0.0), "ap0", -100.0, -60.0, f24=FLAG_LOST)
    db = FingerprintDatabase(rows)
    out = recover_lost(db, fit_all_regressors(db))
    rec = [s for s in out.samples if s.flag == FLAG_RECOVERED_DUAL]
    assert len(rec) == 1
    assert rec[0].band == BAND_24
    assert rec[0].rssi == pytest.approx(-56.0, abs=1.0)


def test_recover_dual_lost_stays_sentinel():
    rows = []
    for i in range(12):
        rows += dual_rows((float(i), 0.0), "ap0", -56.0, -60.0)
    rows += dual_rows((20.0, 0.0), "ap0", -100.0, -100.0, f24=FLAG_LOST, f5=FLAG_LOST)
    db = FingerprintDatabase(rows)
    out = recover_lost(db, fit_all_regressors(db))
    tail = [s for s in out.samples if s.key == (20.0, 0.0)]
    assert all(s.flag == FLAG_LOST and s.rssi == -100.0 for s in tail)


def test_recover_idempotent_and_preserves_measured():
    rng = np.random.default_rng(3)
    rows = []
    for i in range(30):
        loc = (float(i), float(i % 5))
        lost24 = rng.random() < 0.2
        rows += dual_rows(loc, "ap0",
                          -100.0 if lost24 else rng.uniform(-70, -50), rng.uniform(-75, -55),
                          f24=FLAG_LOST if lost24 else FLAG_MEASURED)
    db = FingerprintDatabase(rows)
    regs = fit_all_regressors(db)
    once = recover_lost(db, regs)
    twice = recover_lost(once, regs)
    assert once.to_csv() == twice.to_csv()
    for before, after in zip(db.samples, once.samples):
        if before.flag == FLAG_MEASURED:
            assert after.rssi == before.rssi and after.flag == FLAG_MEASURED
    # no single-band-lost row remains
    for loc, per in once.by_location().items():
        flags = {band: per[("ap0", band)].flag for band in (BAND_24, BAND_5)}
        lost = [b for b, f in flags.items() if f == FLAG_LOST]
        assert len(lost) in (0, 2)


def test_recover_directional_consistency():
    rows = []
    for i in range(15):
        rows += dual_rows((float(i), 0.0), "ap0", -50.0 - 0.2 * i, -56.0 - 0.4 * i)
    rows += dual_rows((7.5, 0.0), "ap0", -100.0, -59.0, f24=FLAG_LOST)
    db = FingerprintDatabase(rows)
    regs = fit_all_regressors(db)
    out = recover_lost(db, regs)
    per = out.by_location()[(7.5, 0.0)]
    delta = per[("ap0", BAND_24)].rssi - per[("ap0", BAND_5)].rssi
    assert delta == pytest.approx(regs[("ap0", PREDICT_24_FROM_5)].predict_delta((7.5, 0.0)))


def test_recover_against_world_oracle():
    # synthetic world, 20% single-band loss injected; recovered values close
    # to the deterministic ground-truth mean
    ap = AccessPoint("ap0", (0.0, 0.0), default_bands(2.0))
    world = RfWorld([ap], LossModel(p_floor=0.0), seed=42)
    rng = np.random.default_rng(1)
    rows = []
    truth = {}
    for i, x in enumerate(np.linspace(2.0, 40.0, 60)):
        loc = (round(float(x), 6), 0.0)
        r24 = sample_rssi(world, ap, BAND_24, loc, t=1000.0 * i)
        r5 = sample_rssi(world, ap, BAND_5, loc, t=1000.0 * i)
        lost24 = rng.random() < 0.2
        rows += dual_rows(loc, "ap0", -100.0 if lost24 else r24, r5,
                          f24=FLAG_LOST if lost24 else FLAG_MEASURED)
        truth[loc] = rssi_mean(ap, BAND_24, loc)
    db = FingerprintDatabase(rows)
    out = recover_lost(db, fit_all_regressors(db))
    errors = [abs(s.rssi - truth[s.key]) for s in out.samples if s.flag == FLAG_RECOVERED_DUAL]
    assert errors and float(np.mean(errors)) <= 2 * 2.0
