import json
from importlib import resources

import numpy as np
import pytest

from sfse.cli import EXIT_INVALID, EXIT_OK, EXIT_PARTIAL, main
from sfse.data import directory_hash

SMALL = {
    "case": "case4_dist",
    "profile": {"n_households": 3, "duration_steps": 7 * 14400, "daily_period_steps": 14400,
                "load_peak": 0.3, "pv_peak": 0.2, "walk_crossing_steps": 180},
    "timeline": {"window": 10, "factor": 10, "n_load_buses": 3, "n_pv_buses": 2},
    "dataset": {"n_sequences": 120, "split_fraction": 0.9},
    "scenarios": {"T": [5], "n_s": [3], "n_v": [0], "lambda": [0, 2],
                  "estimators": ["dnn", "wls", "persistence"]},
    "repetitions": 2,
    "train": {"epochs": 2},
    "record_runtime": False,
}


@pytest.fixture
def cfg(tmp_path):
    c = dict(SMALL, dataset_dir=str(tmp_path / "data"), output_dir=str(tmp_path / "out"))
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(c))
    return p, c


def test_generate_is_deterministic(cfg, tmp_path, capsys):
    p, c = cfg
    assert main(["generate", "--config", str(p)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "steps=10080 train=108 test=12" in out and "observability=38%" in out
    h1 = directory_hash(c["dataset_dir"])
    assert main(["generate", "--config", str(p), "--dataset-dir", str(tmp_path / "d2")]) == EXIT_OK
    # the echoed config differs only in dataset_dir
    a = np.load(tmp_path / "data" / "v.npy")
    b = np.load(tmp_path / "d2" / "v.npy")
    assert np.array_equal(a, b)
    assert main(["generate", "--config", str(p)]) == EXIT_OK
    assert directory_hash(c["dataset_dir"]) == h1
    resolved = json.loads((tmp_path / "data" / "resolved_config.json").read_text())
    assert resolved["case"] == "case4_dist" and resolved["seed"] == 0


def test_invalid_case_file_exits_2_naming_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    case = json.loads((resources.files("sfse") / "cases" / "case4_dist.json").read_text())
    case["slack_index"] = 9
    bad.write_text(json.dumps(case))
    assert main(["generate", "--case", str(bad), "--dataset-dir", str(tmp_path / "x")]) == EXIT_INVALID
    assert "slack_index" in capsys.readouterr().err


def test_invalid_config_exits_2(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"scenarios": {"T": []}}))
    assert main(["generate", "--config", str(p)]) == EXIT_INVALID
    p.write_text("{nope")
    assert main(["generate", "--config", str(p)]) == EXIT_INVALID
    p.write_text(json.dumps({"bogus": 1}))
    assert main(["generate", "--config", str(p)]) == EXIT_INVALID
    assert main(["train", "--dataset-dir", str(tmp_path / "missing")]) == EXIT_INVALID


def test_empty_estimator_list_is_usage_error(cfg):
    with pytest.raises(SystemExit) as e:
        main(["evaluate", "--config", str(cfg[0]), "--estimators"])
    assert e.value.code == 2


def test_train_evaluate_compare_pipeline(cfg, tmp_path, capsys):
    p, c = cfg
    out = tmp_path / "out"
    assert main(["generate", "--config", str(p)]) == EXIT_OK
    assert main(["train", "--config", str(p)]) == EXIT_OK
    ckpts = sorted(x.name for x in (out / "checkpoints").iterdir())
    assert ckpts == ["dnn_T5_ns3_nv0_lam0_rep0.npz", "dnn_T5_ns3_nv0_lam0_rep1.npz",
                     "dnn_T5_ns3_nv0_lam2_rep0.npz", "dnn_T5_ns3_nv0_lam2_rep1.npz"]
    curve = (out / "curves" / "dnn_T5_ns3_nv0_lam2_rep0.csv").read_text().splitlines()
    assert len(curve) == 1 + 2

    stamp = {x: x.stat().st_mtime_ns for x in (out / "checkpoints").iterdir()}
    capsys.readouterr()
    assert main(["train", "--config", str(p), "--resume"]) == EXIT_OK
    assert "trained 0 of 0" in capsys.readouterr().out
    assert all(x.stat().st_mtime_ns == t for x, t in stamp.items())

    assert main(["evaluate", "--config", str(p), "--dump-predictions"]) == EXIT_OK
    report = (out / "report.csv").read_bytes()
    assert len(report.decode().splitlines()) == 1 + 4
    assert (out / "predictions" / "wls_T5_ns3_nv0.npz").exists()
    assert main(["evaluate", "--config", str(p)]) == EXIT_OK
    assert (out / "report.csv").read_bytes() == report

    assert main(["compare", "--config", str(p)]) == EXIT_OK
    for f in ("comparison.csv", "comparison_mse_mag.svg", "comparison_mse_ang.svg"):
        assert (out / f).exists()

    (out / "checkpoints" / "dnn_T5_ns3_nv0_lam2_rep1.npz").unlink()
    assert main(["evaluate", "--config", str(p), "--estimators", "dnn"]) == EXIT_PARTIAL
    meta = json.loads((out / "report.meta.json").read_text())
    assert "missing checkpoint" in meta["failures"]["dnn_T5_ns3_nv0_lam2"][0]


def test_compare_rejects_missing_report(cfg, tmp_path):
    assert main(["compare", "--config", str(cfg[0]), str(tmp_path / "nope.csv")]) == EXIT_INVALID


def test_desk_scale_and_flag_overrides(cfg, tmp_path):
    p, c = cfg
    assert main(["generate", "--config", str(p), "--desk-scale", "--seed", "3"]) == EXIT_OK
    r = json.loads((tmp_path / "data" / "resolved_config.json").read_text())
    assert r["repetitions"] == 5 and r["dataset"]["n_sequences"] == 2222 and r["seed"] == 3
