"""Adam training loop, prediction and checkpoint I/O for the neural estimator."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SequenceSet, SfseDataset, SfseSequence, Standardizer, partial_feature_index
from .grid import GridModel, to_complex, to_real
from .nn import DnnArchitecture, forward, init_params, loss_and_gradients

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sfse-checkpoint/1"


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0
    batch_size: int = 50
    epochs: int = 300
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    validation_fraction: float = 0.1
    patience: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(state: AdamState, params: dict, grads: dict, config: TrainConfig) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)


@dataclass
class TrainedModel:
    params: dict
    scaler: Standardizer
    architecture: DnnArchitecture
    grid: GridModel
    training_curve: list = field(default_factory=list)
    validation_curve: list = field(default_factory=list)
    config: TrainConfig | None = None
    best_epoch: int = -1

    @property
    def voltage_scaler(self) -> Standardizer:
        n = self.architecture.n_buses
        return self.scaler.subset(slice(2 * n, 4 * n))


def _partial_scaler(scaler: Standardizer, mask) -> Standardizer:
    return scaler.subset(partial_feature_index(mask))


def standardized_batch(seqs: SequenceSet, scaler: Standardizer, idx=None):
    """``(history_std, partial_std, s_true, v_true)`` for a slice of a SequenceSet."""
    history, partial, s_true, v_true = seqs.arrays(idx)
    part_sc = _partial_scaler(scaler, seqs.mask)
    return scaler.apply(history), part_sc.apply(partial), s_true, v_true


def _mean_loss(params, arch, seqs, scaler, grid, lam, batch_size=500):
    from .nn import pi_loss_terms

    vs = scaler.subset(slice(2 * arch.n_buses, 4 * arch.n_buses))
    total = 0.0
    for start in range(0, len(seqs), batch_size):
        idx = np.arange(start, min(start + batch_size, len(seqs)))
        h, p, s, v = standardized_batch(seqs, scaler, idx)
        t1, t2, _, _ = pi_loss_terms(s, v, forward(params, arch, h, p), grid, vs)
        total += float(np.sum(t1 + lam * t2))
    return total / len(seqs)


def train(dataset: SfseDataset, grid: GridModel, config: TrainConfig = TrainConfig(),
          params: dict | None = None) -> TrainedModel:
    """Train with shuffled Adam mini-batches and validation early stopping.

    A ``validation_fraction`` slice of the training windows is held out;
    the parameters of the best validation epoch are returned. With
    ``validation_fraction=0`` training runs all epochs and keeps the last
    parameters.
    """
    mask = dataset.mask
    arch = DnnArchitecture(grid.n_buses, mask.n_s, mask.n_v)
    rng = np.random.default_rng(config.seed)
    params = init_params(arch, rng) if params is None else {k: a.copy() for k, a in params.items()}
    scaler = dataset.scaler
    v_scaler = scaler.subset(slice(2 * arch.n_buses, 4 * arch.n_buses))

    n_total = len(dataset.train)
    n_val = int(round(config.validation_fraction * n_total))
    order = rng.permutation(n_total)
    val_idx, fit_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    fit_set = SequenceSet(dataset.timeline, dataset.train.targets[fit_idx], dataset.T, mask)
    val_set = SequenceSet(dataset.timeline, dataset.train.targets[val_idx], dataset.T, mask) \
        if n_val else None

    state = AdamState.zeros_like(params)
    curve, val_curve = [], []
    best = (np.inf, -1, None)
    for epoch in range(config.epochs):
        perm = rng.permutation(len(fit_set))
        losses = []
        for start in range(0, len(perm), config.batch_size):
            batch = standardized_batch(fit_set, scaler, perm[start:start + config.batch_size])
            try:
                loss, grads, _ = loss_and_gradients(params, arch, batch, grid, config.lam, v_scaler)
            except FloatingPointError as err:
                raise TrainingDiverged(epoch, str(err)) from None
            adam_step(state, params, grads, config)
            losses.append(loss * len(batch[0]))
        curve.append(float(np.sum(losses) / len(perm)))
        if not np.isfinite(curve[-1]):
            raise TrainingDiverged(epoch, "non-finite epoch loss")
        if val_set is None:
            continue
        val = _mean_loss(params, arch, val_set, scaler, grid, config.lam)
        val_curve.append(val)
        if val < best[0]:
            best = (val, epoch, {k: a.copy() for k, a in params.items()})
        elif epoch - best[1] >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best[1])
            break
    best_epoch = len(curve) - 1
    if best[2] is not None:
        params, best_epoch = best[2], best[1]
    return TrainedModel(params, scaler, arch, grid, curve, val_curve, config, best_epoch)


def predict_batch(model: TrainedModel, seqs: SequenceSet, batch_size: int = 1000) -> np.ndarray:
    """Complex voltage estimates ``(len(seqs), N)`` in physical per-unit."""
    arch = model.architecture
    if seqs.mask.n_s != arch.n_s or seqs.mask.n_v != arch.n_v:
        raise ValueError("sequence mask does not match the model architecture")
    out = []
    for start in range(0, len(seqs), batch_size):
        idx = np.arange(start, min(start + batch_size, len(seqs)))
        h, p, _, _ = standardized_batch(seqs, model.scaler, idx)
        out.append(to_complex(model.voltage_scaler.invert(forward(model.params, arch, h, p))))
    return np.concatenate(out) if out else np.zeros((0, arch.n_buses), dtype=complex)


def predict(model: TrainedModel, sequence: SfseSequence) -> np.ndarray:
    """Voltage phasor estimate for one SFSE sequence."""
    arch = model.architecture
    n = arch.n_buses
    if sequence.history_s.ndim != 2 or sequence.history_s.shape[1] != n:
        raise ValueError(f"sequence history must cover {n} buses")
    mask = sequence.mask
    if mask.n_s != arch.n_s or mask.n_v != arch.n_v:
        raise ValueError("sequence mask does not match the model architecture")
    frames = np.concatenate([to_real(sequence.history_s), to_real(sequence.history_v)], axis=1)
    full = np.concatenate([to_real(np.nan_to_num(sequence.s_partial)),
                           to_real(np.nan_to_num(sequence.v_partial))])
    cols = partial_feature_index(mask)
    h = model.scaler.apply(frames)[None]
    p = model.scaler.subset(cols).apply(full[cols])[None]
    v_std = forward(model.params, arch, h, p)[0]
    return to_complex(model.voltage_scaler.invert(v_std))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: TrainedModel, path) -> Path:
    """Write a self-describing ``.npz`` checkpoint (float64 tensors + JSON header)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CHECKPOINT_FORMAT,
        "architecture": model.architecture.to_dict(),
        "scaler": model.scaler.to_dict(),
        "config": asdict(model.config) if model.config else None,
        "training_curve": model.training_curve,
        "validation_curve": model.validation_curve,
        "best_epoch": model.best_epoch,
    }
    arrays = {f"param/{k}": np.asarray(a, dtype=np.float64) for k, a in sorted(model.params.items())}
    arrays["Y"] = np.asarray(model.grid.Y)
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, grid: GridModel | None = None) -> TrainedModel:
    with np.load(path) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        Y = z["Y"].copy()
    if grid is None:
        grid = GridModel(Y)
    elif not np.array_equal(grid.Y, Y):
        raise ValueError(f"{path}: checkpoint was trained on a different admittance matrix")
    cfg = TrainConfig(**header["config"]) if header["config"] else None
    return TrainedModel(params, Standardizer.from_dict(header["scaler"]),
                        DnnArchitecture(**header["architecture"]), grid,
                        header["training_curve"], header["validation_curve"], cfg,
                        header["best_epoch"])
