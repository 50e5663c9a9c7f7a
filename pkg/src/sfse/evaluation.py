"""Polar-space error metrics, scenario runs and comparison reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import SfseDataset
from .grid import GridModel, observability
from .train import TrainConfig, TrainedModel, predict_batch, save_checkpoint, train
from .wls import LmOptions, wls_estimate

log = logging.getLogger(__name__)

ESTIMATORS = ("dnn", "wls", "wls_fixed_slack", "persistence")
REPORT_COLUMNS = ("scenario_id", "estimator", "T", "n_s", "n_v", "lambda", "observability_pct",
                  "mse_mag_mean", "mse_mag_std", "mse_ang_mean", "mse_ang_std", "repetitions",
                  "runtime_s")
UNITS = {"mse_mag": "p.u.^2", "mse_ang": "rad^2"}


def persistence_estimate(sequence) -> np.ndarray:
    """Carry ``v(t-1)`` forward; ignores everything observed at step t."""
    hv = np.asarray(sequence.history_v)
    if hv.ndim != 2 or hv.shape[0] == 0:
        raise ValueError("persistence needs a non-empty history")
    return hv[-1].copy()


def wrap_angle(x):
    """Map angles into (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(y == -np.pi, np.pi, y)


def polar_mse(v_hat, v_true) -> tuple[float, float]:
    """Magnitude MSE (p.u.^2) and wrapped angle MSE (rad^2), averaged over all entries.

    Accepts single frames or stacked batches. Buses whose true magnitude is
    zero carry no defined angle and are left out of the angle term.
    """
    v_hat = np.asarray(v_hat, dtype=complex)
    v_true = np.asarray(v_true, dtype=complex)
    if v_hat.shape != v_true.shape:
        raise ValueError(f"shape mismatch {v_hat.shape} vs {v_true.shape}")
    mag = float(np.mean((np.abs(v_hat) - np.abs(v_true)) ** 2))
    ok = np.abs(v_true) > 0
    if not ok.all():
        log.warning("angle error skipped for %d zero-magnitude true voltages", int((~ok).sum()))
    if not ok.any():
        return mag, 0.0
    d = wrap_angle(np.angle(v_hat[ok]) - np.angle(v_true[ok]))
    return mag, float(np.mean(d ** 2))


# ----------------------------------------------------------------- scenarios

@dataclass(frozen=True)
class ScenarioSpec:
    T: int
    n_s: int
    n_v: int = 0
    lam: float = 0.0
    estimator: str = "dnn"
    repetitions: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.T < 2 or self.n_s < 0 or self.n_v < 0 or self.lam < 0:
            raise ValueError("invalid scenario parameters")

    @property
    def scenario_id(self) -> str:
        lam = f"_lam{self.lam:g}" if self.estimator == "dnn" else ""
        return f"{self.estimator}_T{self.T}_ns{self.n_s}_nv{self.n_v}{lam}"

    def repetition_seed(self, k: int) -> int:
        return self.seed + k


@dataclass
class ReportRow:
    spec: ScenarioSpec
    observability_pct: float
    mse_mag: list = field(default_factory=list)
    mse_ang: list = field(default_factory=list)
    runtime_s: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return bool(self.failures)

    def record(self) -> dict:
        mag, ang = np.array(self.mse_mag, float), np.array(self.mse_ang, float)
        stat = lambda a, f: float(f(a)) if a.size else math.nan
        s = self.spec
        return {"scenario_id": s.scenario_id, "estimator": s.estimator, "T": s.T, "n_s": s.n_s,
                "n_v": s.n_v, "lambda": s.lam, "observability_pct": self.observability_pct,
                "mse_mag_mean": stat(mag, np.mean), "mse_mag_std": stat(mag, np.std),
                "mse_ang_mean": stat(ang, np.mean), "mse_ang_std": stat(ang, np.std),
                "repetitions": len(self.mse_mag), "runtime_s": round(self.runtime_s, 3)}


@dataclass
class EvaluationReport:
    rows: list = field(default_factory=list)

    def records(self) -> list[dict]:
        return [r.record() for r in self.rows]

    @property
    def any_failed(self) -> bool:
        return any(r.failed for r in self.rows)

    def write_csv(self, path, include_runtime: bool = True) -> Path:
        """Write the report CSV plus a ``.meta.json`` sidecar with units and failures.

        ``include_runtime=False`` zeroes the wall-clock column so that repeated
        runs produce byte-identical files.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
            w.writeheader()
            for rec in self.records():
                if not include_runtime:
                    rec["runtime_s"] = 0.0
                w.writerow({k: _fmt(v) for k, v in rec.items()})
        meta = {"units": UNITS, "angle_wrap": "(-pi, pi]",
                "failures": {r.spec.scenario_id: r.failures for r in self.rows if r.failures}}
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        num = [c for c in REPORT_COLUMNS if c not in ("scenario_id", "estimator")]
        for r in rows:
            for c in num:
                r[c] = float(r[c])
        return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


ModelProvider = Callable[[ScenarioSpec, int], TrainedModel]


class TrainProvider:
    """Train a fresh model per repetition (picklable for worker pools)."""

    def __init__(self, dataset: SfseDataset, grid: GridModel, template: TrainConfig):
        self.dataset, self.grid, self.template = dataset, grid, template

    def __call__(self, spec: ScenarioSpec, k: int) -> TrainedModel:
        cfg = replace(self.template, lam=spec.lam, seed=spec.repetition_seed(k))
        return train(self.dataset, self.grid, cfg)


def _estimate(spec, k, dataset, grid, provider, lm_opts, checkpoint_dir):
    test = dataset.test
    if spec.estimator == "persistence":
        return np.stack([persistence_estimate(s) for s in test])
    if spec.estimator in ("wls", "wls_fixed_slack"):
        fix = spec.estimator == "wls_fixed_slack"
        return np.stack([wls_estimate(s, grid, lm_opts, spec.scenario_id, fix) for s in test])
    model = provider(spec, k)
    if checkpoint_dir is not None:
        save_checkpoint(model, Path(checkpoint_dir) / f"{spec.scenario_id}_rep{k}.npz")
    return predict_batch(model, test)


def _repetition(args):
    spec, k, dataset, grid, provider, lm_opts, checkpoint_dir = args
    try:
        v_hat = _estimate(spec, k, dataset, grid, provider, lm_opts, checkpoint_dir)
    except Exception as err:  # recorded per row; the scenario continues
        return k, None, f"rep {k}: {type(err).__name__}: {err}"
    return k, v_hat, None


def run_scenario(spec: ScenarioSpec, dataset: SfseDataset, grid: GridModel, *,
                 train_config: TrainConfig = TrainConfig(), provider: ModelProvider | None = None,
                 lm_opts: LmOptions = LmOptions(), jobs: int = 1, checkpoint_dir=None,
                 dump_predictions=None) -> ReportRow:
    """Evaluate one scenario on the dataset's test split.

    DNN repetitions each train (or obtain from ``provider``) a model seeded by
    ``spec.seed + k``. The baselines are deterministic, so they are computed
    once and the result is counted for every repetition.
    """
    if dataset.T != spec.T or dataset.mask.n_s != spec.n_s or dataset.mask.n_v != spec.n_v:
        raise ValueError(f"{spec.scenario_id}: dataset has T={dataset.T}, "
                         f"n_s={dataset.mask.n_s}, n_v={dataset.mask.n_v}")
    provider = provider or TrainProvider(dataset, grid, train_config)
    t0 = time.perf_counter()
    reps = range(spec.repetitions) if spec.estimator == "dnn" else range(1)
    jobs_ = [(spec, k, dataset, grid, provider, lm_opts, checkpoint_dir) for k in reps]
    if jobs > 1 and len(jobs_) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_repetition, jobs_))
    else:
        results = [_repetition(j) for j in jobs_]
    row = ReportRow(spec, observability(spec.n_s, spec.n_v, grid.n_buses) * 100)
    v_true = dataset.test.arrays()[3]
    preds = {}
    for k, v_hat, err in sorted(results, key=lambda r: r[0]):
        if err is not None:
            log.error("%s %s", spec.scenario_id, err)
            row.failures.append(err)
            continue
        preds[k] = v_hat
        mag, ang = polar_mse(v_hat, v_true)
        row.mse_mag.append(mag)
        row.mse_ang.append(ang)
    if spec.estimator != "dnn" and row.mse_mag:
        row.mse_mag *= spec.repetitions
        row.mse_ang *= spec.repetitions
    row.runtime_s = time.perf_counter() - t0
    if dump_predictions is not None and preds:
        p = Path(dump_predictions)
        p.mkdir(parents=True, exist_ok=True)
        ks = sorted(preds)
        np.savez(p / f"{spec.scenario_id}.npz", v_hat=np.stack([preds[k] for k in ks]),
                 v_true=v_true, repetition=np.array(ks), t=dataset.test.targets)
    return row


def run_scenarios(specs, dataset_for: Callable[[ScenarioSpec], SfseDataset], grid: GridModel,
                  **kwargs) -> EvaluationReport:
    """Run several scenarios; ``dataset_for`` maps each spec to its dataset."""
    report = EvaluationReport()
    for spec in specs:
        try:
            report.rows.append(run_scenario(spec, dataset_for(spec), grid, **kwargs))
        except Exception as err:
            log.error("%s failed: %s", spec.scenario_id, err)
            report.rows.append(ReportRow(spec, observability(spec.n_s, spec.n_v, grid.n_buses) * 100,
                                         failures=[f"{type(err).__name__}: {err}"]))
    return report


def recompute_from_predictions(path) -> tuple[list, list]:
    """Per-repetition MSEs recomputed from a ``--dump-predictions`` file."""
    with np.load(path) as z:
        pairs = [polar_mse(v, z["v_true"]) for v in z["v_hat"]]
    return [p[0] for p in pairs], [p[1] for p in pairs]


# ---------------------------------------------------------------- comparison

def _series_label(rec: dict) -> str:
    lab = rec["estimator"]
    if lab == "dnn":
        lab += f" lambda={float(rec['lambda']):g}"
    return f"{lab} T={int(float(rec['T']))}"


def compare_report(reports, out_dir, name: str = "comparison") -> dict:
    """Align report rows by observability and emit a CSV plus one SVG per metric.

    Series are (estimator, lambda, T) combinations; every series must cover
    the same observability values. Returns the written paths.
    """
    recs = []
    for r in reports:
        if isinstance(r, EvaluationReport):
            recs.extend(r.records())
        elif isinstance(r, (str, Path)):
            recs.extend(EvaluationReport.read_csv(r))
        else:
            recs.extend(r)
    series: dict[str, dict[float, dict]] = {}
    for rec in recs:
        x = round(float(rec["observability_pct"]), 6)
        s = series.setdefault(_series_label(rec), {})
        if x in s:
            raise ValueError(f"duplicate point {x}% in series {_series_label(rec)!r}")
        s[x] = rec
    if len(series) < 2:
        raise ValueError("comparison needs at least two series")
    axes = {lab: tuple(sorted(pts)) for lab, pts in series.items()}
    xs = next(iter(axes.values()))
    bad = [lab for lab, a in axes.items() if a != xs]
    if bad:
        raise ValueError(f"misaligned observability axes: {bad} differ from {xs}")
    xs = sorted(xs, reverse=True)
    labels = sorted(series)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["observability_pct"] + [f"{lab} {m}" for lab in labels
                                            for m in ("mse_mag", "mse_ang")])
        for x in xs:
            w.writerow([_fmt(x)] + [_fmt(float(series[lab][x][f"{m}_mean"])) for lab in labels
                                    for m in ("mse_mag", "mse_ang")])
    paths = {"csv": csv_path}
    for metric, ylabel in (("mse_mag", "magnitude MSE [p.u.^2]"), ("mse_ang", "angle MSE [rad^2]")):
        paths[metric] = _chart(out / f"{name}_{metric}.svg", xs, labels, series, metric, ylabel)
    return paths


def _chart(path, xs, labels, series, metric, ylabel):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "sfse", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for lab in labels:
            y = [float(series[lab][x][f"{metric}_mean"]) for x in xs]
            ax.plot(xs, y, marker="o", label=lab)
        ax.set_xlabel("observability [%]")
        ax.set_ylabel(ylabel)
        ax.set_yscale("log")
        ax.invert_xaxis()
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
