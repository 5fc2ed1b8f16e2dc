import numpy as np
import pytest
from scipy.stats import norm

from wifisurvey.fpmap import (
    ErrorStats, FingerprintMap, Observation, PfParams, bayes_localize,
    build_map, evaluate, knn_localize, observation_from_scan, pf_track,
)
from wifisurvey.gridmap import FREE, BinaryGrid
from wifisurvey.rfsim import (
    BAND_24, BAND_5, BANDS, FLAG_MEASURED, AccessPoint, FingerprintDatabase,
    FingerprintSample, LossModel, RfWorld, default_bands, rssi_mean,
    sample_rssi,
)


def world_grid(nx=6, ny=6, pitch=0.8):
    pts = np.array([[i * pitch + 0.4, j * pitch + 0.4] for j in range(ny) for i in range(nx)])
    regions = np.zeros(len(pts), dtype=int)
    return pts, regions


def zero_noise_world(n_aps=4, seed=0):
    # APs sit well outside the mapped patch, like units down the corridor
    from wifisurvey.rfsim import TemporalModel
    positions = [(-7.0, -5.0), (12.0, -4.0), (-6.0, 11.0), (12.5, 10.0), (2.5, -9.0)]
    aps = [AccessPoint(f"ap{i}", positions[i], default_bands(0.0)) for i in range(n_aps)]
    return RfWorld(aps, LossModel(p_floor=0.0),
                   TemporalModel(epoch_shift_sigma=0.0), seed=seed)


def db_at(world, pts, regions, epoch=0, t_step=37.0):
    rows = []
    for idx, (p, r) in enumerate(zip(pts, regions)):
        loc = (round(float(p[0]), 6), round(float(p[1]), 6))
        for ap in world.aps:
            for band in BANDS:
                v = sample_rssi(world, ap, band, p, t=idx * t_step, epoch=epoch)
                rows.append(FingerprintSample(loc, int(r), ap.id, band, v,
                                              FLAG_MEASURED, idx * t_step, epoch))
    return FingerprintDatabase(rows, epoch)


def map_from_zero_noise(n_aps=4):
    world = zero_noise_world(n_aps)
    pts, regions = world_grid()
    db = db_at(world, pts, regions)
    return world, pts, regions, build_map(db, pts, regions)


def perfect_obs(fpmap, j):
    entries = []
    for i, ap in enumerate(fpmap.ap_ids):
        for b, band in enumerate(BANDS):
            entries.append((ap, band, float(fpmap.means[j, i, b])))
    return Observation(entries)


def test_build_map_zero_noise_matches_truth():
    # train at double density (0.4 m) and predict at the 0.8 m reference grid
    world = zero_noise_world()
    pts, regions = world_grid()
    dense = np.array([[i * 0.4 + 0.4, j * 0.4 + 0.4] for j in range(11) for i in range(11)])
    db = db_at(world, dense, np.zeros(len(dense), dtype=int))
    fpmap = build_map(db, pts, regions)
    for i, ap in enumerate(world.aps):
        for b, band in enumerate(BANDS):
            truth = np.array([rssi_mean(ap, band, p) for p in pts])
            assert np.max(np.abs(fpmap.means[:, i, b] - truth)) <= 1.0


def test_build_map_shapes_and_positive_variance():
    world, pts, regions, fpmap = map_from_zero_noise(n_aps=3)
    assert fpmap.means.shape == (len(pts), 3, 2)
    assert fpmap.variances.shape == (len(pts), 3, 2)
    assert np.all(fpmap.variances > 0)
    assert not fpmap.imputed.any()


def test_build_map_single_sample_region():
    world = zero_noise_world(1)
    pts = np.array([[0.4, 0.4], [1.2, 0.4], [2.0, 0.4]])
    regions = np.zeros(3, dtype=int)
    loc = (0.4, 0.4)
    rows = [FingerprintSample(loc, 0, "ap0", band, -55.0, FLAG_MEASURED, 0.0, 0)
            for band in BANDS]
    fpmap = build_map(FingerprintDatabase(rows), pts, regions, ap_ids=["ap0"])
    assert fpmap.means[0, 0, 0] == pytest.approx(-55.0, abs=1.5)


def test_build_map_missing_ap_imputed():
    pts = np.array([[0.0, 0.0], [1.0, 0.0]])
    regions = np.zeros(2, dtype=int)
    rows = [FingerprintSample((0.0, 0.0), 0, "ap0", BAND_24, -50.0, FLAG_MEASURED, 0.0, 0)]
    fpmap = build_map(FingerprintDatabase(rows), pts, regions, ap_ids=["ap0", "ghost"])
    assert fpmap.imputed[:, 1, :].all()
    assert np.all(fpmap.means[:, 1, :] == -100.0)


def test_bayes_exact_observation_returns_grid_point():
    _, pts, _, fpmap = map_from_zero_noise()
    for j in (0, 7, 35):
        assert bayes_localize(fpmap, perfect_obs(fpmap, j)) == tuple(pts[j])


def test_bayes_tie_breaks_to_lower_index():
    pts = np.array([[0.0, 0.0], [4.0, 0.0]])
    means = np.full((2, 1, 2), -60.0)
    variances = np.full((2, 1, 2), 4.0)
    fpmap = FingerprintMap(pts, np.zeros(2, int), ["ap0"], means, variances,
                           np.zeros((2, 1, 2), bool))
    obs = Observation([("ap0", BAND_24, -58.0), ("ap0", BAND_5, -62.0)])
    assert bayes_localize(fpmap, obs) == (0.0, 0.0)


def test_bayes_matches_brute_force_product_oracle():
    rng = np.random.default_rng(5)
    m = 25
    pts = rng.uniform(0, 10, size=(m, 2))
    means = rng.uniform(-90, -40, size=(m, 2, 2))
    variances = rng.uniform(1.0, 16.0, size=(m, 2, 2))
    fpmap = FingerprintMap(pts, np.zeros(m, int), ["ap0", "ap1"], means, variances,
                           np.zeros((m, 2, 2), bool))
    for _ in range(20):
        obs_vals = rng.uniform(-90, -40, size=4)
        obs = Observation([("ap0", BAND_24, obs_vals[0]), ("ap0", BAND_5, obs_vals[1]),
                           ("ap1", BAND_24, obs_vals[2]), ("ap1", BAND_5, obs_vals[3])])
        probs = []
        for j in range(m):
            p = 1.0
            for i in range(2):
                for b in range(2):
                    p *= norm.pdf(obs_vals[i * 2 + b], means[j, i, b],
                                  np.sqrt(variances[j, i, b]))
            probs.append(p)
        assert bayes_localize(fpmap, obs) == tuple(pts[int(np.argmax(probs))])


def test_knn_k1_recovers_grid_point():
    _, pts, _, fpmap = map_from_zero_noise()
    assert knn_localize(fpmap, perfect_obs(fpmap, 11), k=1) == tuple(pts[11])


def test_knn_k2_symmetric_midpoint():
    pts = np.array([[0.0, 0.0], [2.0, 0.0], [50.0, 50.0]])
    means = np.stack([np.full((1, 2), -50.0), np.full((1, 2), -54.0),
                      np.full((1, 2), -90.0)])
    variances = np.full((3, 1, 2), 4.0)
    fpmap = FingerprintMap(pts, np.zeros(3, int), ["ap0"], means, variances,
                           np.zeros((3, 1, 2), bool))
    obs = Observation([("ap0", BAND_24, -52.0), ("ap0", BAND_5, -52.0)])
    assert knn_localize(fpmap, obs, k=2) == (1.0, 0.0)


def test_knn_matches_full_sort_oracle():
    rng = np.random.default_rng(8)
    _, pts, _, fpmap = map_from_zero_noise()
    flat = fpmap.flat_means()
    for _ in range(25):
        vec = rng.uniform(-90, -40, size=flat.shape[1])
        entries = []
        idx = 0
        for ap in fpmap.ap_ids:
            for band in BANDS:
                entries.append((ap, band, float(vec[idx])))
                idx += 1
        obs = Observation(entries)
        dists = np.linalg.norm(flat - vec, axis=1)
        top2 = np.argsort(dists, kind="stable")[:2]
        expected = tuple(pts[top2].mean(axis=0))
        assert knn_localize(fpmap, obs, k=2) == pytest.approx(expected)


def test_knn_k1_equals_bayes_with_equal_variances():
    rng = np.random.default_rng(9)
    m = 30
    pts = rng.uniform(0, 10, size=(m, 2))
    means = rng.uniform(-80, -40, size=(m, 2, 2))
    variances = np.full((m, 2, 2), 9.0)
    fpmap = FingerprintMap(pts, np.zeros(m, int), ["ap0", "ap1"], means, variances,
                           np.zeros((m, 2, 2), bool))
    for _ in range(15):
        vals = rng.uniform(-80, -40, size=4)
        obs = Observation([("ap0", BAND_24, vals[0]), ("ap0", BAND_5, vals[1]),
                           ("ap1", BAND_24, vals[2]), ("ap1", BAND_5, vals[3])])
        assert knn_localize(fpmap, obs, k=1) == bayes_localize(fpmap, obs)


def free_room(size_px=12, res=0.5):
    return BinaryGrid(np.full((size_px, size_px), FREE, dtype=np.uint8), res)


def test_pf_particle_count_conserved_and_converges():
    world, pts, regions, fpmap = map_from_zero_noise()
    grid = free_room(12, 0.5)  # 6 m x 6 m free area covering the grid
    target = pts[14]
    obs_seq = []
    rng = np.random.default_rng(3)
    for _ in range(30):
        scan = [s for s in __import__("wifisurvey.rfsim", fromlist=["simulate_scan"]).simulate_scan(
            world, target, 0.0, 0, rng)]
        obs_seq.append(observation_from_scan(scan))
    track = pf_track(fpmap, obs_seq, grid, PfParams(n_particles=200, motion_std=0.3),
                     np.random.default_rng(4))
    assert track.estimates.shape == (30, 2)
    final_err = np.hypot(*(track.estimates[-1] - target))
    assert final_err <= 0.8  # within one grid pitch


def test_pf_zero_motion_perfect_obs_snaps_to_point():
    _, pts, _, fpmap = map_from_zero_noise()
    grid = free_room(12, 0.5)
    obs_seq = [perfect_obs(fpmap, 21)] * 20
    track = pf_track(fpmap, obs_seq, grid,
                     PfParams(n_particles=300, motion_std=0.05),
                     np.random.default_rng(6))
    final_err = np.hypot(*(track.estimates[-1] - pts[21]))
    assert final_err <= 0.4  # half the 0.8 m grid pitch


def test_pf_variance_decreases_for_stationary_target():
    world, pts, regions, fpmap = map_from_zero_noise()
    grid = free_room(12, 0.5)
    rng = np.random.default_rng(11)
    spreads = []
    for seed in range(5):
        obs_seq = [perfect_obs(fpmap, 14)] * 12
        track = pf_track(fpmap, obs_seq, grid,
                         PfParams(n_particles=200, motion_std=0.2),
                         np.random.default_rng(100 + seed))
        errs = np.hypot(*(track.estimates - pts[14]).T)
        spreads.append(errs[:3].mean() - errs[-3:].mean())
    assert np.median(spreads) > 0  # estimates tighten over the first steps


def test_evaluate_zero_noise_self_localization():
    world, pts, regions, fpmap = map_from_zero_noise()
    traj = pts[[3, 10, 17, 24, 31]]
    stats = evaluate(fpmap, world, traj, "bayes", np.random.default_rng(0))
    assert stats.mean_m <= 0.8


def test_evaluate_stats_properties():
    world, pts, regions, fpmap = map_from_zero_noise()
    rng = np.random.default_rng(1)
    traj = rng.uniform(0.4, 4.4, size=(12, 2))
    stats = evaluate(fpmap, world, traj, "knn", rng)
    assert np.all(stats.errors_m >= 0)
    assert stats.max_m >= stats.mean_m
    assert np.all(np.diff(stats.cdf_values) >= -1e-12)
    assert stats.cdf_fractions[-1] == 1.0
    assert stats.cdf_values[-1] == pytest.approx(stats.max_m)
