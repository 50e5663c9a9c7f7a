import numpy as np
import pytest

from sfse.data import build_dataset
from sfse.grid import ObservabilityMask
from sfse.nn import DnnArchitecture, init_params
from sfse.train import (CHECKPOINT_FORMAT, AdamState, TrainConfig, adam_step, load_checkpoint,
                        predict, predict_batch, save_checkpoint, standardized_batch, train)


def test_adam_first_step_is_signed_learning_rate():
    p = {"w": np.array([1.0, -2.0, 0.5]), "z": np.zeros(2)}
    g = {"w": np.array([0.3, -4.0, 1e-3]), "z": np.zeros(2)}
    cfg = TrainConfig(learning_rate=1e-3)
    st = AdamState.zeros_like(p)
    adam_step(st, p, g, cfg)
    np.testing.assert_allclose(p["w"], [1 - 1e-3, -2 + 1e-3, 0.5 - 1e-3], rtol=1e-7)
    np.testing.assert_array_equal(p["z"], 0.0)
    assert st.t == 1


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.arange(4.0)}
    st = AdamState.zeros_like(p)
    for _ in range(5):
        adam_step(st, p, {"w": np.zeros(4)}, TrainConfig())
    np.testing.assert_array_equal(p["w"], np.arange(4.0))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-0.5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


@pytest.fixture(scope="module")
def pilot_dataset(pilot_small):
    return build_dataset(pilot_small, 5, ObservabilityMask.by_index(4, 3), n_sequences=400, seed=0)


def test_training_is_deterministic(pilot_dataset, case4):
    cfg = TrainConfig(lam=2.0, epochs=3, seed=11)
    a = train(pilot_dataset, case4, cfg)
    b = train(pilot_dataset, case4, cfg)
    assert a.training_curve == b.training_curve
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_loss_trends_down(pilot_dataset, case4):
    for seed in range(3):
        m = train(pilot_dataset, case4, TrainConfig(epochs=40, seed=seed, validation_fraction=0))
        c = m.training_curve
        assert np.mean(c[-10:]) < np.mean(c[:10])


def test_large_lambda_does_not_diverge(pilot_dataset, case4):
    m = train(pilot_dataset, case4, TrainConfig(lam=20.0, epochs=15, seed=0))
    assert np.all(np.isfinite(m.training_curve))
    assert np.all(np.isfinite(predict_batch(m, pilot_dataset.test)))


def test_memorizes_single_sequence(pilot_small, case4):
    ds = build_dataset(pilot_small, 5, ObservabilityMask.by_index(4, 3), n_sequences=2,
                       split_fraction=0.5, seed=3)
    cfg = TrainConfig(epochs=2000, batch_size=1, validation_fraction=0, seed=0)
    m = train(ds, case4, cfg)
    assert m.training_curve[-1] < 1e-4
    seq = ds.train[0]
    assert np.max(np.abs(predict(m, seq) - seq.v_true)) < 1e-2


def test_best_epoch_restored(pilot_dataset, case4):
    m = train(pilot_dataset, case4, TrainConfig(epochs=12, seed=4, patience=3))
    assert m.best_epoch == int(np.argmin(m.validation_curve))


def test_predict_matches_batch_and_rejects_bad_mask(pilot_dataset, case4):
    m = train(pilot_dataset, case4, TrainConfig(epochs=2, seed=0))
    batch = predict_batch(m, pilot_dataset.test)
    single = np.array([predict(m, s) for s in list(pilot_dataset.test)[:10]])
    np.testing.assert_allclose(single, batch[:10], rtol=1e-12, atol=1e-14)
    seq = pilot_dataset.test[0]
    seq.mask = ObservabilityMask.by_index(4, 2)
    with pytest.raises(ValueError):
        predict(m, seq)


def test_checkpoint_round_trip(pilot_dataset, case4, tmp_path):
    m = train(pilot_dataset, case4, TrainConfig(lam=2.0, epochs=2, seed=0))
    path = save_checkpoint(m, tmp_path / "m.npz")
    r = load_checkpoint(path, case4)
    assert r.scaler == m.scaler and r.architecture == m.architecture and r.config == m.config
    assert r.training_curve == m.training_curve
    np.testing.assert_array_equal(predict_batch(r, pilot_dataset.test), predict_batch(m, pilot_dataset.test))
    assert load_checkpoint(path).grid.n_buses == 4
    with np.load(path) as z:
        assert CHECKPOINT_FORMAT in z["header"].tobytes().decode()


def test_checkpoint_rejects_other_grid(pilot_dataset, case4, ieee37, tmp_path):
    m = train(pilot_dataset, case4, TrainConfig(epochs=1, seed=0))
    path = save_checkpoint(m, tmp_path / "m.npz")
    with pytest.raises(ValueError, match="admittance"):
        load_checkpoint(path, ieee37)


def test_standardized_batch_shapes(pilot_dataset):
    h, p, s, v = standardized_batch(pilot_dataset.train, pilot_dataset.scaler, np.arange(7))
    assert h.shape == (7, 4, 16) and p.shape == (7, 6) and s.shape == v.shape == (7, 4)
    assert DnnArchitecture(4, 3).po_input_dim == p.shape[1]
    assert init_params(DnnArchitecture(4, 3), 0)["po.0.W"].shape[1] == p.shape[1]
