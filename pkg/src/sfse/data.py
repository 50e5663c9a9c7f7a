"""Synthetic load/PV timelines, SFSE windowing and standardization.

The pipeline is

    synth_profiles -> reactive_from_pf -> smooth -> downsample
        -> assign_buses -> power flow -> build_dataset

Smoothing and downsampling are linear and act per series, so they are applied
to the nine source series before bus assignment; the result is identical to
filtering every bus series after assignment and far cheaper.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridModel, ObservabilityMask, to_complex, to_real
from .power_flow import PowerFlowOptions, solve_time_series

log = logging.getLogger(__name__)

STD_FLOOR = 1e-9


# ------------------------------------------------------------------ profiles

@dataclass(frozen=True)
class LoadProfileConfig:
    """Shape of the synthetic household/PV recordings.

    Amplitudes are per-unit on the grid base. ``walk_amplitude`` and
    ``noise_level`` are fractions of ``load_peak``.
    """

    n_households: int = 8
    duration_steps: int = 604800
    source_resolution_s: float = 1.0
    daily_period_steps: int = 86400
    load_peak: float = 0.08
    walk_amplitude: float = 0.3
    walk_crossing_steps: int = 1800
    noise_level: float = 0.05
    pv_peak: float = 0.05
    cloudiness: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.duration_steps < 1:
            raise ValueError("duration_steps must be positive")
        if self.n_households < 1 or self.daily_period_steps < 1:
            raise ValueError("n_households and daily_period_steps must be positive")


def _fold(x, amplitude):
    """Map a free walk onto [-amplitude, amplitude] with reflecting walls."""
    if amplitude == 0:
        return np.zeros_like(x)
    period = 4 * amplitude
    return amplitude - np.abs(np.mod(x + amplitude, period) - 2 * amplitude)


def _bounded_walk(rng, n_series, length, amplitude, crossing_steps):
    if amplitude == 0:
        return np.zeros((n_series, length))
    step = amplitude / np.sqrt(crossing_steps)
    start = rng.uniform(-amplitude, amplitude, size=(n_series, 1))
    return _fold(start + np.cumsum(rng.normal(0.0, step, (n_series, length)), axis=1), amplitude)


def _day_hour(length, period):
    return 24.0 * (np.arange(length) % period) / period


def synth_profiles(config: LoadProfileConfig):
    """Household active-power series and one PV active-power series.

    Households: positive diurnal base (morning and evening peaks, per-house
    shift) plus a reflecting random walk plus white noise. PV: clear-sky bell
    between 06:00 and 18:00 modulated by a slow cloud walk; exactly zero at
    night. Returns ``(households, pv)`` with shapes ``(H, L)`` and ``(L,)``.
    """
    c = config
    rng = np.random.default_rng(c.seed)
    L, H = c.duration_steps, c.n_households
    hour = _day_hour(L, c.daily_period_steps)

    shift = rng.uniform(-1.0, 1.0, (H, 1))
    morning = rng.uniform(0.15, 0.35, (H, 1))
    evening = rng.uniform(0.35, 0.6, (H, 1))
    base = c.load_peak * (0.35
                          + morning * np.exp(-(((hour - 7.5 - shift) / 1.2) ** 2))
                          + evening * np.exp(-(((hour - 19.5 - shift) / 2.0) ** 2)))

    crossing = max(1, int(c.walk_crossing_steps))
    walk = c.load_peak * _bounded_walk(rng, H, L, c.walk_amplitude, crossing)
    noise = rng.normal(0.0, c.noise_level * c.load_peak, (H, L)) if c.noise_level else 0.0
    households = np.maximum(base + walk + noise, 0.01 * c.load_peak)

    daylight = (hour > 6.0) & (hour < 18.0)
    bell = np.where(daylight, np.sin(np.pi * (hour - 6.0) / 12.0) ** 2, 0.0)
    clouds = 1.0 - c.cloudiness * (0.5 + 0.5 * _bounded_walk(rng, 1, L, 1.0, crossing)[0])
    pv_noise = rng.normal(0.0, c.noise_level * c.pv_peak, L) if c.noise_level else 0.0
    pv = np.where(daylight, np.maximum(c.pv_peak * bell * clouds + bell * pv_noise, 0.0), 0.0)
    return households, pv


def reactive_from_pf(p_series, power_factor: float) -> np.ndarray:
    """Complex power ``P + jQ`` with ``Q = P tan(arccos pf)`` (lagging)."""
    if not 0 < power_factor <= 1:
        raise ValueError(f"power factor must lie in (0, 1], got {power_factor}")
    p = np.asarray(p_series, dtype=float)
    return p + 1j * p * np.tan(np.arccos(power_factor))


@dataclass(frozen=True)
class BusAssignment:
    load_bus_map: dict
    pv_buses: tuple

    def to_dict(self):
        return {"load_bus_map": {str(k): v for k, v in self.load_bus_map.items()},
                "pv_buses": list(self.pv_buses)}


def assign_buses(profiles, pv_series, grid: GridModel, seed, n_load_buses: int = 25,
                 n_pv_buses: int = 18, load_buses=None, pv_buses=None):
    """Spread household and PV phasors over the non-slack buses.

    Households are repeated circularly (1..H, 1..H, ...) over a shuffled list
    of ``n_load_buses`` buses; ``-pv`` is placed on ``n_pv_buses`` random
    buses; a bus with both gets the sum. Output is the per-bus net demand
    (load minus generation), shape ``(N, L)``, and the assignment.
    Explicit ``load_buses``/``pv_buses`` lists bypass the random draw.
    """
    profiles = np.atleast_2d(np.asarray(profiles, dtype=complex))
    pv_series = np.asarray(pv_series, dtype=complex)
    n = grid.n_buses
    pq = grid.pq_buses
    rng = np.random.default_rng(seed)
    if load_buses is None:
        if n_load_buses > len(pq):
            raise ValueError(f"{n_load_buses} load buses do not fit in {len(pq)} PQ buses")
        load_buses = rng.permutation(pq)[:n_load_buses]
    if pv_buses is None:
        if n_pv_buses > len(pq):
            raise ValueError(f"{n_pv_buses} PV buses do not fit in {len(pq)} PQ buses")
        pv_buses = np.sort(rng.choice(pq, size=n_pv_buses, replace=False))
    for b in list(load_buses) + list(pv_buses):
        if b == grid.slack_index:
            raise ValueError("the slack bus cannot carry a load or PV profile")
        if not 0 <= b < n:
            raise ValueError(f"bus {b} outside 0..{n - 1}")

    demand = np.zeros((n, profiles.shape[1]), dtype=complex)
    load_map = {}
    for k, b in enumerate(load_buses):
        h = k % len(profiles)
        load_map[int(b)] = h
        demand[b] += profiles[h]
    for b in pv_buses:
        demand[b] -= pv_series
    return demand, BusAssignment(load_map, tuple(int(b) for b in pv_buses))


def smooth(series, window: int) -> np.ndarray:
    """Trailing moving average along the last axis.

    The first ``window - 1`` outputs average the available prefix.
    """
    x = np.asarray(series)
    if window < 1:
        raise ValueError("window must be at least 1")
    if window > x.shape[-1]:
        raise ValueError(f"window {window} longer than series ({x.shape[-1]})")
    c = np.cumsum(x, axis=-1)
    out = np.empty_like(c)
    out[..., :window] = c[..., :window] / np.arange(1, window + 1)
    out[..., window:] = (c[..., window:] - c[..., :-window]) / window
    return out


def downsample(series, factor: int) -> np.ndarray:
    """Keep samples ``factor-1, 2*factor-1, ...`` along the last axis."""
    if factor < 1:
        raise ValueError("factor must be at least 1")
    x = np.asarray(series)
    n = x.shape[-1] // factor
    return x[..., factor - 1::factor][..., :n]


# ------------------------------------------------------------------ timeline

@dataclass
class Timeline:
    """Power-flow-consistent phasor history of one grid, shape (steps, N)."""

    s: np.ndarray
    v: np.ndarray
    grid: GridModel
    info: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.s.shape[0]

    def frames(self) -> np.ndarray:
        """Real feature matrix ``(steps, 4N)``: interleaved s then interleaved v."""
        return np.concatenate([to_real(self.s), to_real(self.v)], axis=1)


def generate_timeline(grid: GridModel, config: LoadProfileConfig | None = None, *,
                      window: int = 60, factor: int = 60, pf_range=(0.96, 0.98),
                      n_load_buses: int = 25, n_pv_buses: int = 18, seed: int | None = None,
                      pf_options: PowerFlowOptions | None = None,
                      warm_start: bool = False) -> Timeline:
    """Run the whole preparation chain and solve every step's power flow."""
    config = config or LoadProfileConfig()
    seed = config.seed if seed is None else seed
    households, pv = synth_profiles(config)
    rng = np.random.default_rng([seed, 1])
    pfs = rng.uniform(*pf_range, size=len(households))
    complex_loads = np.stack([reactive_from_pf(p, pf) for p, pf in zip(households, pfs)])
    src = np.vstack([complex_loads, pv.astype(complex)[None]])
    src = downsample(smooth(src, window), factor)
    demand, assignment = assign_buses(src[:-1], src[-1], grid, seed=[seed, 2],
                                      n_load_buses=n_load_buses, n_pv_buses=n_pv_buses)
    injections = -demand.T
    S, V, iters = solve_time_series(grid, injections, pf_options, warm_start=warm_start)
    info = {"seed": seed, "window": window, "factor": factor,
            "power_factors": [float(x) for x in pfs], "assignment": assignment.to_dict(),
            "max_pf_iterations": int(iters.max(initial=0)),
            "profile_config": {k: getattr(config, k) for k in config.__dataclass_fields__}}
    return Timeline(S, V, grid, info)


# ------------------------------------------------------------ standardization

class Standardizer:
    """Per-feature affine scaling to zero mean and unit (population) variance."""

    def __init__(self, mean=None, std=None):
        self.mean = None if mean is None else np.asarray(mean, dtype=float)
        self.std = None if std is None else np.asarray(std, dtype=float)

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        X = X.reshape(-1, X.shape[-1])
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def _check(self):
        if not self.fitted:
            raise RuntimeError("standardizer used before fit")

    def apply(self, X) -> np.ndarray:
        self._check()
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def invert(self, Z) -> np.ndarray:
        self._check()
        return np.asarray(Z, dtype=float) * self.std + self.mean

    def subset(self, idx) -> "Standardizer":
        self._check()
        return Standardizer(self.mean[idx], self.std[idx])

    def to_dict(self):
        self._check()
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])

    def __eq__(self, other):
        if not isinstance(other, Standardizer):
            return NotImplemented
        if not (self.fitted and other.fitted):
            return self.fitted == other.fitted
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)


def standardize_fit(X) -> Standardizer:
    return Standardizer.fit(X)


def standardize_apply(scaler: Standardizer, X) -> np.ndarray:
    return scaler.apply(X)


def standardize_invert(scaler: Standardizer, Z) -> np.ndarray:
    return scaler.invert(Z)


# ------------------------------------------------------------------ datasets

@dataclass
class SfseSequence:
    """One SFSE sample: T-1 full frames, a masked frame at step t, and truth.

    Unobserved entries of ``s_partial``/``v_partial`` are NaN.
    """

    history_s: np.ndarray
    history_v: np.ndarray
    s_partial: np.ndarray
    v_partial: np.ndarray
    mask: ObservabilityMask
    s_true: np.ndarray
    v_true: np.ndarray
    t: int = -1

    @property
    def T(self) -> int:
        return self.history_s.shape[0] + 1


class SequenceSet:
    """Windows of a timeline addressed by their masked-step indices."""

    def __init__(self, timeline: Timeline, targets, T: int, mask: ObservabilityMask):
        self.timeline = timeline
        self.targets = np.asarray(targets, dtype=int)
        self.T = T
        self.mask = mask
        self._frames = timeline.frames()

    def __len__(self):
        return len(self.targets)

    def __getitem__(self, k) -> SfseSequence:
        t = int(self.targets[k])
        tl = self.timeline
        hist = slice(t - self.T + 1, t)
        s_p = np.where(self.mask.power_observed, tl.s[t], np.nan)
        v_p = np.where(self.mask.voltage_observed, tl.v[t], np.nan)
        return SfseSequence(tl.s[hist].copy(), tl.v[hist].copy(), s_p, v_p, self.mask,
                            tl.s[t].copy(), tl.v[t].copy(), t)

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def window_indices(self, idx=None) -> np.ndarray:
        targets = self.targets if idx is None else self.targets[idx]
        return targets[:, None] + np.arange(-self.T + 1, 1)

    def arrays(self, idx=None):
        """Batch arrays in physical units.

        Returns ``(history, partial, s_true, v_true)`` where ``history`` is
        ``(B, T-1, 4N)`` real, ``partial`` is ``(B, 2(N_s+N_v))`` real and the
        truths are complex ``(B, N)``.
        """
        targets = self.targets if idx is None else self.targets[idx]
        win = self.window_indices(idx)
        history = self._frames[win[:, :-1]]
        partial = self._frames[targets][:, partial_feature_index(self.mask)]
        return history, partial, self.timeline.s[targets], self.timeline.v[targets]


def partial_feature_index(mask: ObservabilityMask) -> np.ndarray:
    """Column indices into a 4N frame for the observed entries of a masked frame."""
    n = mask.n_buses
    p = np.flatnonzero(mask.power_observed)
    v = np.flatnonzero(mask.voltage_observed)
    ps = np.stack([2 * p, 2 * p + 1], axis=1).ravel()
    vs = 2 * n + np.stack([2 * v, 2 * v + 1], axis=1).ravel()
    return np.concatenate([ps, vs]).astype(int)


@dataclass
class SfseDataset:
    train: SequenceSet
    test: SequenceSet
    scaler: Standardizer
    T: int
    mask: ObservabilityMask
    seed: int = 0
    split_step: int = 0

    @property
    def timeline(self) -> Timeline:
        return self.train.timeline

    @property
    def grid(self) -> GridModel:
        return self.timeline.grid

    def meta(self) -> dict:
        return {"T": self.T, "mask": self.mask.to_dict(), "scaler": self.scaler.to_dict(),
                "seed": self.seed, "split_step": self.split_step,
                "train_targets": self.train.targets.tolist(),
                "test_targets": self.test.targets.tolist()}


def build_dataset(timeline: Timeline, T: int, mask: ObservabilityMask, n_sequences: int = 9000,
                  split_fraction: float = 0.9, seed: int = 0,
                  test_time_fraction: float = 1 / 7) -> SfseDataset:
    """Draw SFSE windows from a solved timeline.

    Training windows lie inside the first ``1 - test_time_fraction`` of the
    timeline, test windows inside the rest. Window positions are drawn with
    replacement. The standardizer is fitted on the frames covered by the
    training windows only.
    """
    if T < 2:
        raise ValueError("T must be at least 2")
    if mask.n_buses != timeline.grid.n_buses:
        raise ValueError("mask size does not match the grid")
    steps = timeline.steps
    split_step = int(round(steps * (1 - test_time_fraction)))
    n_train = int(round(split_fraction * n_sequences))
    n_test = n_sequences - n_train
    if n_train < 1 or n_test < 1:
        raise ValueError(f"split of {n_sequences} sequences at {split_fraction} leaves a side empty")
    lo_train, hi_train = T - 1, split_step - 1
    lo_test, hi_test = split_step + T - 1, steps - 1
    if hi_train < lo_train or hi_test < lo_test:
        raise ValueError(f"timeline of {steps} steps too short for T={T} windows on both sides")
    rng = np.random.default_rng(seed)
    train_t = rng.integers(lo_train, hi_train + 1, size=n_train)
    test_t = rng.integers(lo_test, hi_test + 1, size=n_test)
    return _assemble(timeline, T, mask, train_t, test_t, seed, split_step)


def _assemble(timeline, T, mask, train_t, test_t, seed, split_step, scaler=None):
    train = SequenceSet(timeline, train_t, T, mask)
    test = SequenceSet(timeline, test_t, T, mask)
    if scaler is None:
        used = np.unique(train.window_indices())
        scaler = Standardizer.fit(train._frames[used])
    return SfseDataset(train, test, scaler, T, mask, seed, split_step)


def dataset_with(dataset: SfseDataset, T: int | None = None,
                 mask: ObservabilityMask | None = None, n_sequences: int | None = None,
                 split_fraction: float | None = None) -> SfseDataset:
    """Rebuild a dataset on the same timeline with different window settings."""
    n = n_sequences or (len(dataset.train) + len(dataset.test))
    frac = split_fraction if split_fraction is not None else len(dataset.train) / n
    return build_dataset(dataset.timeline, T or dataset.T, mask or dataset.mask, n, frac,
                         dataset.seed)


# --------------------------------------------------------------- persistence

def save_timeline(timeline: Timeline, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "s.npy", timeline.s)
    np.save(d / "v.npy", timeline.v)
    return d


def save_dataset(dataset: SfseDataset, directory, case: dict | None = None,
                 extra: dict | None = None) -> Path:
    """Write ``meta.json`` plus ``s.npy``/``v.npy`` frame matrices."""
    d = save_timeline(dataset.timeline, directory)
    meta = dataset.meta()
    meta["timeline"] = dataset.timeline.info
    meta["steps"] = dataset.timeline.steps
    if case is not None:
        meta["case"] = case
    if extra:
        meta.update(extra)
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return d


def load_dataset(directory, grid: GridModel) -> SfseDataset:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    s = np.load(d / "s.npy")
    v = np.load(d / "v.npy")
    if s.shape[1] != grid.n_buses:
        raise ValueError(f"dataset has {s.shape[1]} buses, grid has {grid.n_buses}")
    tl = Timeline(s, v, grid, meta.get("timeline", {}))
    return _assemble(tl, meta["T"], ObservabilityMask.from_dict(meta["mask"]),
                     np.array(meta["train_targets"]), np.array(meta["test_targets"]),
                     meta["seed"], meta["split_step"], Standardizer.from_dict(meta["scaler"]))


def directory_hash(directory) -> str:
    """SHA-256 over every file in a directory (names and bytes, sorted)."""
    h = hashlib.sha256()
    for p in sorted(Path(directory).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(directory)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
