import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfse.data import (LoadProfileConfig, Standardizer, assign_buses, build_dataset, downsample,
                       generate_timeline, load_dataset, partial_feature_index, reactive_from_pf,
                       save_dataset, directory_hash, smooth, standardize_apply,
                       standardize_fit, standardize_invert, synth_profiles)
from sfse.grid import ObservabilityMask, load_case, observability, pfe_residual

SMALL = LoadProfileConfig(n_households=3, duration_steps=4 * 3600, daily_period_steps=3600,
                          walk_crossing_steps=60, seed=5)


def test_profiles_periodic_without_randomness():
    cfg = LoadProfileConfig(n_households=2, duration_steps=3000, daily_period_steps=1000,
                            noise_level=0.0, walk_amplitude=0.0, cloudiness=0.0)
    h, pv = synth_profiles(cfg)
    np.testing.assert_array_equal(h[:, :1000], h[:, 1000:2000])
    np.testing.assert_array_equal(pv[:1000], pv[2000:])


def test_pv_zero_at_night_and_households_positive():
    h, pv = synth_profiles(SMALL)
    hour = 24.0 * (np.arange(SMALL.duration_steps) % 3600) / 3600
    night = (hour <= 6) | (hour >= 18)
    assert np.all(pv[night] == 0)
    assert np.all(pv >= 0)
    assert pv[~night].max() > 0
    assert np.all(h > 0)


def test_profiles_reproducible():
    a = synth_profiles(SMALL)
    b = synth_profiles(SMALL)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_zero_duration_rejected():
    with pytest.raises(ValueError):
        LoadProfileConfig(duration_steps=0)


def test_reactive_from_pf():
    np.testing.assert_array_equal(reactive_from_pf([1.0, 2.0], 1.0).imag, 0)
    assert reactive_from_pf([1.0], 0.96)[0].imag == pytest.approx(0.29167, abs=1e-5)
    for bad in (0.0, 1.2, -0.5):
        with pytest.raises(ValueError):
            reactive_from_pf([1.0], bad)


def test_assign_buses_circular_and_overlap():
    g = load_case("ieee37")
    profiles = np.arange(1, 9)[:, None] * np.ones((8, 4))
    pv = np.full(4, 0.5)
    demand, asg = assign_buses(profiles, pv, g, seed=0)
    assert len(asg.load_bus_map) == 25 and len(asg.pv_buses) == 18
    assert g.slack_index not in asg.load_bus_map and g.slack_index not in asg.pv_buses
    # shuffled bus order cycles through households 0..7, 0..7, ...
    assert list(asg.load_bus_map.values()) == [k % 8 for k in range(25)]
    for b in range(36):
        expect = 0.0
        if b in asg.load_bus_map:
            expect += asg.load_bus_map[b] + 1
        if b in asg.pv_buses:
            expect -= 0.5
        np.testing.assert_array_equal(demand[b], expect)


def test_assign_rejects_slack():
    g = load_case("case4_dist")
    with pytest.raises(ValueError):
        assign_buses(np.ones((1, 3)), np.ones(3), g, 0, load_buses=[0, 1])


def test_smooth_examples():
    np.testing.assert_allclose(smooth([2.0, 4, 6, 8], 2), [2, 3, 5, 7])
    np.testing.assert_allclose(smooth(np.full(10, 3.0), 4), 3.0)
    with pytest.raises(ValueError):
        smooth([1.0, 2.0], 3)


def test_downsample_examples():
    x = np.arange(7.0)
    np.testing.assert_array_equal(downsample(x, 1), x)
    np.testing.assert_array_equal(downsample(np.array([1.0, 2, 3, 4]), 2), [2, 4])
    assert downsample(np.zeros(604800), 60).shape == (10080,)
    assert downsample(smooth(np.zeros(604800), 60), 60).shape == (10080,)


def test_smoothing_then_downsampling_damps_noise_by_window():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(600_000)
    y = downsample(smooth(x, 60), 60)
    ratio = x.var() / y.var()
    assert 60 * 0.8 < ratio < 60 * 1.2


@given(st.lists(st.floats(-1e3, 1e3), min_size=5, max_size=60), st.integers(1, 5))
def test_smooth_matches_brute_force(xs, w):
    x = np.array(xs)
    brute = [np.mean(x[max(0, i - w + 1):i + 1]) for i in range(len(x))]
    np.testing.assert_allclose(smooth(x, w), brute, rtol=1e-9, atol=1e-9)


def test_standardizer_hand_values():
    sc = standardize_fit(np.array([[1.0], [2.0], [3.0]]))
    assert sc.mean[0] == 2.0
    assert sc.std[0] == pytest.approx(0.8165, abs=1e-4)
    np.testing.assert_allclose(standardize_apply(sc, [[1.0], [2.0], [3.0]]).ravel(),
                               [-1.2247, 0, 1.2247], atol=1e-4)


def test_standardizer_constant_feature_and_errors():
    sc = Standardizer.fit(np.full((5, 2), 7.0))
    assert np.all(sc.std == 1e-9)
    np.testing.assert_array_equal(sc.apply(np.full((3, 2), 7.0)), 0)
    with pytest.raises(RuntimeError):
        Standardizer().invert([1.0])


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_standardizer_round_trip(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(3, 0.01, (40, 6)) * rng.uniform(0.5, 5, 6)
    sc = Standardizer.fit(X)
    Z = sc.apply(X)
    np.testing.assert_allclose(Z.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(Z.var(0), 1, atol=1e-12)
    np.testing.assert_allclose(standardize_invert(sc, Z), X, rtol=0, atol=1e-12 * np.abs(X).max())


@pytest.fixture(scope="module")
def pilot_timeline():
    g = load_case("case4_dist")
    cfg = LoadProfileConfig(n_households=3, duration_steps=7 * 1440 * 10,
                            daily_period_steps=1440 * 10, load_peak=0.3, pv_peak=0.2, seed=1)
    return generate_timeline(g, cfg, window=10, factor=10, n_load_buses=3, n_pv_buses=2)


def test_timeline_satisfies_pfe(pilot_timeline):
    tl = pilot_timeline
    assert tl.steps == 7 * 1440
    assert np.max(np.abs(pfe_residual(tl.grid, tl.s, tl.v))) < 1e-8


def test_build_dataset_split_and_windows(pilot_timeline):
    mask = ObservabilityMask.by_index(4, 3)
    ds = build_dataset(pilot_timeline, 5, mask, 900, 0.9, seed=3)
    assert len(ds.train) == 810 and len(ds.test) == 90
    train_w = ds.train.window_indices()
    test_w = ds.test.window_indices()
    assert train_w.max() < ds.split_step <= test_w.min()
    assert ds.split_step == 6 * 1440
    seq = ds.train[0]
    assert seq.history_s.shape == (4, 4) and seq.T == 5
    assert np.isnan(seq.s_partial[3]) and not np.isnan(seq.s_partial[:3]).any()
    assert np.all(np.isnan(seq.v_partial))
    np.testing.assert_array_equal(seq.history_v[-1], pilot_timeline.v[seq.t - 1])
    hist, part, s_true, v_true = ds.train.arrays([0])
    assert hist.shape == (1, 4, 16) and part.shape == (1, 6)
    assert seq.mask.observability == observability(3, 0, 4)


def test_scaler_fitted_on_train_frames_only(pilot_timeline):
    ds = build_dataset(pilot_timeline, 3, ObservabilityMask.by_index(4, 2), 300, 0.9, seed=0)
    used = np.unique(ds.train.window_indices())
    Z = ds.scaler.apply(pilot_timeline.frames()[used])
    live = ds.scaler.std > 1e-9
    np.testing.assert_allclose(Z.mean(0)[live], 0, atol=1e-9)
    np.testing.assert_allclose(Z.var(0)[live], 1, atol=1e-9)


def test_full_mask_is_supervised_pair(pilot_timeline):
    ds = build_dataset(pilot_timeline, 2, ObservabilityMask.full(4), 20, 0.5, seed=0)
    seq = ds.test[0]
    np.testing.assert_array_equal(seq.s_partial, seq.s_true)
    np.testing.assert_array_equal(seq.v_partial, seq.v_true)


def test_empty_side_rejected(pilot_timeline):
    with pytest.raises(ValueError):
        build_dataset(pilot_timeline, 5, ObservabilityMask.by_index(4, 2), 10, 1.0)


def test_partial_feature_index():
    m = ObservabilityMask.by_index(3, 2, 1)
    np.testing.assert_array_equal(partial_feature_index(m), [0, 1, 2, 3, 6, 7])


def test_dataset_persistence_round_trip(pilot_timeline, tmp_path):
    ds = build_dataset(pilot_timeline, 4, ObservabilityMask.by_index(4, 2), 100, 0.9, seed=9)
    save_dataset(ds, tmp_path / "a")
    save_dataset(ds, tmp_path / "b")
    assert directory_hash(tmp_path / "a") == directory_hash(tmp_path / "b")
    back = load_dataset(tmp_path / "a", pilot_timeline.grid)
    assert back.scaler == ds.scaler and back.mask == ds.mask and back.T == 4
    np.testing.assert_array_equal(back.train.targets, ds.train.targets)
    np.testing.assert_array_equal(back.timeline.v, pilot_timeline.v)


def test_generation_deterministic():
    g = load_case("case4_dist")
    cfg = LoadProfileConfig(n_households=2, duration_steps=7 * 600, daily_period_steps=600, seed=4)
    a = generate_timeline(g, cfg, window=5, factor=5, n_load_buses=2, n_pv_buses=1)
    b = generate_timeline(g, cfg, window=5, factor=5, n_load_buses=2, n_pv_buses=1)
    assert a.s.tobytes() == b.s.tobytes() and a.v.tobytes() == b.v.tobytes()
