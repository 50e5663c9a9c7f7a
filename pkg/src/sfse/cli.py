"""``sfse`` command line: generate, train, evaluate, compare.

Every command reads an optional JSON config, applies flag overrides and
writes the resolved config next to its outputs. Exit codes: 0 success,
1 partial failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

from .data import (LoadProfileConfig, Timeline, build_dataset, directory_hash, generate_timeline,
                   load_dataset, save_dataset)
from .evaluation import (ESTIMATORS, EvaluationReport, ScenarioSpec, compare_report,
                         run_scenario)
from .grid import CaseFileError, GridModel, ObservabilityMask, load_case, observability
from .train import TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train

log = logging.getLogger("sfse")

EXIT_OK, EXIT_PARTIAL, EXIT_INVALID = 0, 1, 2

DEFAULTS = {
    "case": "ieee37",
    "dataset_dir": "sfse-data",
    "output_dir": "sfse-out",
    "seed": 0,
    "jobs": 1,
    "profile": {},
    "timeline": {"window": 60, "factor": 60, "n_load_buses": 25, "n_pv_buses": 18},
    "dataset": {"n_sequences": 9000, "split_fraction": 0.9},
    "scenarios": {"T": [5], "n_s": [35, 28, 18, 12, 6], "n_v": [0],
                  "lambda": [0, 1, 2, 20], "estimators": ["dnn", "wls", "persistence"]},
    "repetitions": 30,
    "train": {},
    "record_runtime": True,
}
DESK_SCALE = {"repetitions": 5, "dataset": {"n_sequences": 2222}}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from None
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = _merge(cfg, user)
    if args.desk_scale:
        cfg = _merge(cfg, DESK_SCALE)
    for key in ("seed", "jobs", "case", "dataset_dir", "output_dir"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "estimators", None) is not None:
        cfg["scenarios"]["estimators"] = args.estimators
    _validate(cfg)
    return cfg


def _validate(cfg):
    sc = cfg["scenarios"]
    for key in ("T", "n_s", "n_v", "lambda", "estimators"):
        if not isinstance(sc.get(key), list) or not sc[key]:
            raise ConfigError(f"scenarios.{key} must be a non-empty list")
    bad = [e for e in sc["estimators"] if e not in ESTIMATORS]
    if bad:
        raise ConfigError(f"unknown estimators {bad}; choose from {list(ESTIMATORS)}")
    if int(cfg["repetitions"]) < 1 or int(cfg["jobs"]) < 1:
        raise ConfigError("repetitions and jobs must be >= 1")
    known = {f.name for f in fields(TrainConfig)} - {"lam", "seed"}
    extra = set(cfg["train"]) - known
    if extra:
        raise ConfigError(f"unknown train keys {sorted(extra)}")
    extra = set(cfg["profile"]) - {f.name for f in fields(LoadProfileConfig)}
    if extra:
        raise ConfigError(f"unknown profile keys {sorted(extra)}")


def _echo(cfg: dict, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _grid(cfg) -> GridModel:
    return load_case(cfg["case"])


# ------------------------------------------------------------------ generate

def cmd_generate(cfg) -> int:
    grid = _grid(cfg)
    profile = LoadProfileConfig(**_merge({"seed": cfg["seed"]}, cfg["profile"]))
    tl = generate_timeline(grid, profile, seed=cfg["seed"], **cfg["timeline"])
    sc = cfg["scenarios"]
    ds = build_dataset(tl, sc["T"][0], ObservabilityMask.full(grid.n_buses),
                       seed=cfg["seed"], **cfg["dataset"])
    out = save_dataset(ds, cfg["dataset_dir"], case={"source": str(cfg["case"])})
    _echo(cfg, out)
    n = grid.n_buses
    print(f"steps={tl.steps} train={len(ds.train)} test={len(ds.test)} buses={n}")
    for ns in sc["n_s"]:
        for nv in sc["n_v"]:
            print(f"  n_s={ns} n_v={nv} observability={observability(ns, nv, n) * 100:.0f}%")
    print(f"hash={directory_hash(out)}")
    return EXIT_OK


def _timeline(cfg, grid) -> Timeline:
    d = Path(cfg["dataset_dir"])
    if not (d / "meta.json").exists():
        raise ConfigError(f"no dataset in {d}; run 'sfse generate' first")
    return load_dataset(d, grid).timeline


def _dataset_for(cfg, timeline, T, n_s, n_v):
    mask = ObservabilityMask.by_index(timeline.grid.n_buses, n_s, n_v)
    return build_dataset(timeline, T, mask, seed=cfg["seed"], **cfg["dataset"])


def _dnn_specs(cfg):
    sc = cfg["scenarios"]
    return [ScenarioSpec(T, ns, nv, float(lam), "dnn", int(cfg["repetitions"]), cfg["seed"])
            for T in sc["T"] for ns in sc["n_s"] for nv in sc["n_v"] for lam in sc["lambda"]]


def _all_specs(cfg):
    sc = cfg["scenarios"]
    specs = []
    for est in sc["estimators"]:
        if est == "dnn":
            specs += _dnn_specs(cfg)
        else:
            specs += [ScenarioSpec(T, ns, nv, 0.0, est, int(cfg["repetitions"]), cfg["seed"])
                      for T in sc["T"] for ns in sc["n_s"] for nv in sc["n_v"]]
    return specs


# --------------------------------------------------------------------- train

def _checkpoint_path(cfg, spec, k) -> Path:
    return Path(cfg["output_dir"]) / "checkpoints" / f"{spec.scenario_id}_rep{k}.npz"


def _train_unit(args):
    cfg, spec, k, dataset, grid = args
    tc = TrainConfig(**_merge(cfg["train"], {"lam": spec.lam, "seed": spec.repetition_seed(k)}))
    try:
        model = train(dataset, grid, tc)
    except TrainingDiverged as err:
        return spec.scenario_id, k, str(err)
    path = _checkpoint_path(cfg, spec, k)
    save_checkpoint(model, path)
    curve = Path(cfg["output_dir"]) / "curves" / f"{spec.scenario_id}_rep{k}.csv"
    curve.parent.mkdir(parents=True, exist_ok=True)
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "validation_loss"])
        for e, loss in enumerate(model.training_curve):
            val = model.validation_curve[e] if e < len(model.validation_curve) else ""
            w.writerow([e, repr(loss), repr(val) if val != "" else ""])
    return spec.scenario_id, k, None


def cmd_train(cfg, resume: bool = False) -> int:
    grid = _grid(cfg)
    tl = _timeline(cfg, grid)
    _echo(cfg, cfg["output_dir"])
    units, cache = [], {}
    for spec in _dnn_specs(cfg):
        key = (spec.T, spec.n_s, spec.n_v)
        for k in range(spec.repetitions):
            if resume and _checkpoint_path(cfg, spec, k).exists():
                log.info("skip %s rep %d (checkpoint exists)", spec.scenario_id, k)
                continue
            if key not in cache:
                cache[key] = _dataset_for(cfg, tl, *key)
            units.append((cfg, spec, k, cache[key], grid))
    if cfg["jobs"] > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            results = list(pool.map(_train_unit, units))
    else:
        results = [_train_unit(u) for u in units]
    failed = [(sid, k, err) for sid, k, err in results if err]
    for sid, k, err in failed:
        print(f"FAILED {sid} rep {k}: {err}", file=sys.stderr)
    print(f"trained {len(results) - len(failed)} of {len(units)} runs "
          f"({len(failed)} failed) into {cfg['output_dir']}")
    return EXIT_PARTIAL if failed else EXIT_OK


# ------------------------------------------------------------------ evaluate

class CheckpointProvider:
    def __init__(self, cfg, grid):
        self.cfg, self.grid = cfg, grid

    def __call__(self, spec, k):
        path = _checkpoint_path(self.cfg, spec, k)
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        return load_checkpoint(path, self.grid)


def cmd_evaluate(cfg, dump_predictions: bool = False) -> int:
    grid = _grid(cfg)
    tl = _timeline(cfg, grid)
    out = Path(cfg["output_dir"])
    _echo(cfg, out)
    report, cache = EvaluationReport(), {}
    provider = CheckpointProvider(cfg, grid)
    dump = out / "predictions" if dump_predictions else None
    for spec in _all_specs(cfg):
        key = (spec.T, spec.n_s, spec.n_v)
        if key not in cache:
            cache[key] = _dataset_for(cfg, tl, *key)
        row = run_scenario(spec, cache[key], grid, provider=provider, jobs=cfg["jobs"],
                           dump_predictions=dump)
        report.rows.append(row)
        rec = row.record()
        status = "FAILED" if row.failed else "ok"
        print(f"{rec['scenario_id']:<32} obs={rec['observability_pct']:5.1f}% "
              f"mag={rec['mse_mag_mean']:.3e} ang={rec['mse_ang_mean']:.3e} {status}")
    path = report.write_csv(out / "report.csv", include_runtime=cfg["record_runtime"])
    print(f"report: {path}")
    return EXIT_PARTIAL if report.any_failed else EXIT_OK


def cmd_compare(cfg, reports) -> int:
    out = Path(cfg["output_dir"])
    reports = reports or [out / "report.csv"]
    for r in reports:
        if not Path(r).exists():
            raise ConfigError(f"report not found: {r}")
    paths = compare_report(reports, out)
    for key in ("csv", "mse_mag", "mse_ang"):
        print(f"{key}: {paths[key]}")
    return EXIT_OK


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--desk-scale", action="store_true",
                        help="5 repetitions and 2000 training sequences")
    common.add_argument("--case", help="case file or bundled case name")
    common.add_argument("--dataset-dir", dest="dataset_dir")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sfse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate a timeline and write the dataset")
    t = sub.add_parser("train", parents=[common], help="train one checkpoint per scenario and repetition")
    t.add_argument("--resume", action="store_true", help="skip runs whose checkpoint exists")
    e = sub.add_parser("evaluate", parents=[common], help="score estimators on the test split")
    e.add_argument("--estimators", nargs="*", help=f"subset of {list(ESTIMATORS)}")
    e.add_argument("--dump-predictions", action="store_true",
                   help="keep per-sequence predictions for recomputing the report")
    c = sub.add_parser("compare", parents=[common], help="aligned CSV and charts from reports")
    c.add_argument("reports", nargs="*", help="report CSVs (default: <output_dir>/report.csv)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "estimators", None) == []:
        parser.error("--estimators needs at least one estimator")
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.dump_predictions)
        return cmd_compare(cfg, args.reports)
    except CaseFileError as err:
        print(f"error: invalid case file (field '{err.field}'): {err}", file=sys.stderr)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
    except ValueError as err:
        print(f"error: invalid input: {err}", file=sys.stderr)
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
