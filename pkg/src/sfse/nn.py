"""Neural SFSE estimator: architecture, forward pass, loss and backprop.

Data flow for a batch of B examples (all real, standardized)::

    history (B, T-1, 4N) --LSTM(4N->2N)--LSTM(2N->ceil(N/3))--> h_fo
    partial (B, 2(Ns+Nv)) --FC tanh--FC tanh-------------------> h_po
    h = [h_fo, h_po]
    v_tilde = base_fc(h)          4 tanh layers then a linear 2N output
    w, b    = scale(h), shift(h)  linear 2N heads
    v_hat   = w * v_tilde + b

Gradients are computed by explicit reverse-mode passes over cached
activations. Parameters live in a flat ``dict[str, ndarray]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Standardizer
from .grid import GridModel, to_complex, to_real


@dataclass(frozen=True)
class DnnArchitecture:
    n_buses: int
    n_s: int
    n_v: int = 0

    def __post_init__(self):
        if self.n_buses < 1:
            raise ValueError("n_buses must be positive")
        if not (0 <= self.n_s <= self.n_buses and 0 <= self.n_v <= self.n_buses):
            raise ValueError("observable counts out of range")

    @property
    def frame_dim(self) -> int:
        return 4 * self.n_buses

    @property
    def lstm1_hidden(self) -> int:
        return 2 * self.n_buses

    @property
    def fo_feature_dim(self) -> int:
        return math.ceil(self.n_buses / 3)

    @property
    def po_input_dim(self) -> int:
        return 2 * (self.n_s + self.n_v)

    @property
    def po_feature_dim(self) -> int:
        return math.ceil(self.n_buses / 6)

    @property
    def joint_dim(self) -> int:
        return self.fo_feature_dim + self.po_feature_dim

    @property
    def output_dim(self) -> int:
        return 2 * self.n_buses

    def to_dict(self):
        return {"n_buses": self.n_buses, "n_s": self.n_s, "n_v": self.n_v}


BASE_HIDDEN_LAYERS = 4


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_params(arch: DnnArchitecture, rng) -> dict:
    """Uniform(+-1/sqrt(fan_in)) weights; LSTM forget bias 1; scale bias 1."""
    rng = np.random.default_rng(rng)
    p = {}
    for name, d_in, d_h in (("lstm1", arch.frame_dim, arch.lstm1_hidden),
                            ("lstm2", arch.lstm1_hidden, arch.fo_feature_dim)):
        p[f"{name}.W"] = _uniform(rng, (4 * d_h, d_in), d_in)
        p[f"{name}.U"] = _uniform(rng, (4 * d_h, d_h), d_h)
        b = np.zeros(4 * d_h)
        b[d_h:2 * d_h] = 1.0
        p[f"{name}.b"] = b
    P, F, J, O = arch.po_input_dim, arch.po_feature_dim, arch.joint_dim, arch.output_dim
    for k, (d_in, d_out) in enumerate([(P, P), (P, F)]):
        p[f"po.{k}.W"] = _uniform(rng, (d_out, d_in), d_in)
        p[f"po.{k}.b"] = np.zeros(d_out)
    dims = [J] * (BASE_HIDDEN_LAYERS + 1) + [O]
    for k in range(BASE_HIDDEN_LAYERS + 1):
        p[f"base.{k}.W"] = _uniform(rng, (dims[k + 1], dims[k]), dims[k])
        p[f"base.{k}.b"] = np.zeros(dims[k + 1])
    for head in ("scale", "shift"):
        p[f"{head}.W"] = _uniform(rng, (O, J), J)
        p[f"{head}.b"] = np.ones(O) if head == "scale" else np.zeros(O)
    return p


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ------------------------------------------------------------ fully connected

def fc_forward(layers, x, linear_last: bool = False):
    """Apply ``y = tanh(W x + c)`` layer by layer.

    ``layers`` is a sequence of ``(W, c)``; ``x`` is ``(d,)`` or ``(B, d)``.
    With ``linear_last`` the final layer skips the activation.
    """
    y = np.asarray(x, dtype=float)
    for k, (W, c) in enumerate(layers):
        if y.shape[-1] != W.shape[1]:
            raise ValueError(f"layer {k} expects {W.shape[1]} inputs, got {y.shape[-1]}")
        y = y @ W.T + c
        if not (linear_last and k == len(layers) - 1):
            y = np.tanh(y)
    return y


def _fc_stack_forward(p, prefix, n_layers, x, linear_last):
    acts = [x]
    for k in range(n_layers):
        z = acts[-1] @ p[f"{prefix}.{k}.W"].T + p[f"{prefix}.{k}.b"]
        acts.append(z if (linear_last and k == n_layers - 1) else np.tanh(z))
    return acts


def _fc_stack_backward(p, g, prefix, n_layers, acts, dy, linear_last):
    for k in reversed(range(n_layers)):
        if not (linear_last and k == n_layers - 1):
            dy = dy * (1.0 - acts[k + 1] ** 2)
        g[f"{prefix}.{k}.W"] = dy.T @ acts[k]
        g[f"{prefix}.{k}.b"] = dy.sum(axis=0)
        dy = dy @ p[f"{prefix}.{k}.W"]
    return dy


# ----------------------------------------------------------------------- LSTM

def _lstm_layer_forward(W, U, b, xs):
    """xs: (B, L, d_in) -> hidden states (B, L, H) and a cache for backprop."""
    B, L, _ = xs.shape
    H = U.shape[1]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    xw = xs @ W.T + b
    hs = np.empty((B, L, H))
    cache = []
    for t in range(L):
        a = xw[:, t] + h @ U.T
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:])
        c_prev, h_prev = c, h
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cache.append((i, f, g, o, c_prev, tc, h_prev))
    return hs, cache


def _lstm_layer_backward(W, U, xs, cache, dhs):
    """Backprop through time; ``dhs`` is (B, L, H). Returns dW, dU, db, dxs."""
    B, L, _ = xs.shape
    H = U.shape[1]
    da_all = np.empty((B, L, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in reversed(range(L)):
        i, f, g, o, c_prev, tc, h_prev = cache[t]
        dh = dhs[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc ** 2)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        da = da_all[:, t]
        da[:, :H] = di * i * (1.0 - i)
        da[:, H:2 * H] = df * f * (1.0 - f)
        da[:, 2 * H:3 * H] = dg * (1.0 - g ** 2)
        da[:, 3 * H:] = do * o * (1.0 - o)
        dh_next = da @ U
        dc_next = dc * f
    hs_prev = np.stack([step[6] for step in cache], axis=1)
    dW = np.einsum("blg,bld->gd", da_all, xs)
    dU = np.einsum("blg,blh->gh", da_all, hs_prev)
    db = da_all.sum(axis=(0, 1))
    dxs = da_all @ W
    return dW, dU, db, dxs


def lstm_forward(params: dict, sequence) -> np.ndarray:
    """Final hidden state of the two-layer LSTM for one sequence ``(L, 4N)``."""
    xs = np.asarray(sequence, dtype=float)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("sequence must be a non-empty (length, features) array")
    if xs.shape[1] != params["lstm1.W"].shape[1]:
        raise ValueError(f"frames must have {params['lstm1.W'].shape[1]} features")
    h1, _ = _lstm_layer_forward(params["lstm1.W"], params["lstm1.U"], params["lstm1.b"], xs[None])
    h2, _ = _lstm_layer_forward(params["lstm2.W"], params["lstm2.U"], params["lstm2.b"], h1)
    return h2[0, -1]


# --------------------------------------------------------------- full network

def forward(params: dict, arch: DnnArchitecture, history, partial, with_cache: bool = False):
    """Batched forward pass returning standardized estimates ``(B, 2N)``."""
    history = np.asarray(history, dtype=float)
    partial = np.asarray(partial, dtype=float)
    if history.ndim != 3 or history.shape[2] != arch.frame_dim or history.shape[1] == 0:
        raise ValueError(f"history must be (B, T-1, {arch.frame_dim}), got {history.shape}")
    if partial.shape != (history.shape[0], arch.po_input_dim):
        raise ValueError(f"partial frame must be (B, {arch.po_input_dim}), got {partial.shape}")
    p = params
    h1, c1 = _lstm_layer_forward(p["lstm1.W"], p["lstm1.U"], p["lstm1.b"], history)
    h2, c2 = _lstm_layer_forward(p["lstm2.W"], p["lstm2.U"], p["lstm2.b"], h1)
    po_acts = _fc_stack_forward(p, "po", 2, partial, linear_last=False)
    h = np.concatenate([h2[:, -1], po_acts[-1]], axis=1)
    base_acts = _fc_stack_forward(p, "base", BASE_HIDDEN_LAYERS + 1, h, linear_last=True)
    v_tilde = base_acts[-1]
    w = h @ p["scale.W"].T + p["scale.b"]
    b = h @ p["shift.W"].T + p["shift.b"]
    v_hat = w * v_tilde + b
    if not with_cache:
        return v_hat
    cache = dict(history=history, h1=h1, c1=c1, h2=h2, c2=c2, po_acts=po_acts, h=h,
                 base_acts=base_acts, w=w)
    return v_hat, cache


def backward(params: dict, arch: DnnArchitecture, cache: dict, d_vhat) -> dict:
    """Parameter gradients given ``dLoss/dv_hat`` of shape ``(B, 2N)``."""
    p = params
    g = {}
    v_tilde = cache["base_acts"][-1]
    h = cache["h"]
    dw = d_vhat * v_tilde
    db = d_vhat
    dv_tilde = d_vhat * cache["w"]
    g["scale.W"] = dw.T @ h
    g["scale.b"] = dw.sum(axis=0)
    g["shift.W"] = db.T @ h
    g["shift.b"] = db.sum(axis=0)
    dh = dw @ p["scale.W"] + db @ p["shift.W"]
    dh = dh + _fc_stack_backward(p, g, "base", BASE_HIDDEN_LAYERS + 1, cache["base_acts"],
                                 dv_tilde, linear_last=True)
    F = arch.fo_feature_dim
    _fc_stack_backward(p, g, "po", 2, cache["po_acts"], dh[:, F:], linear_last=False)

    h2 = cache["h2"]
    dh2 = np.zeros_like(h2)
    dh2[:, -1] = dh[:, :F]
    dW, dU, db2, dx2 = _lstm_layer_backward(p["lstm2.W"], p["lstm2.U"], cache["h1"],
                                            cache["c2"], dh2)
    g["lstm2.W"], g["lstm2.U"], g["lstm2.b"] = dW, dU, db2
    dW, dU, db1, _ = _lstm_layer_backward(p["lstm1.W"], p["lstm1.U"], cache["history"],
                                          cache["c1"], dx2)
    g["lstm1.W"], g["lstm1.U"], g["lstm1.b"] = dW, dU, db1
    return g


def feature_extract(params: dict, arch: DnnArchitecture, fo_frames, po_frame) -> np.ndarray:
    """Joint feature vector ``[h_fo, h_po]`` for one standardized example."""
    fo = np.asarray(fo_frames, dtype=float)
    po = np.asarray(po_frame, dtype=float)
    if fo.ndim != 2 or fo.shape[1] != arch.frame_dim:
        raise ValueError(f"fo_frames must be (T-1, {arch.frame_dim})")
    if po.shape != (arch.po_input_dim,):
        raise ValueError(f"po_frame must have length {arch.po_input_dim}")
    h_fo = lstm_forward(params, fo)
    h_po = fc_forward([(params["po.0.W"], params["po.0.b"]),
                       (params["po.1.W"], params["po.1.b"])], po)
    return np.concatenate([h_fo, h_po])


def regress(params: dict, h) -> np.ndarray:
    """Scale-and-shift regressor: ``w * v_tilde + b``."""
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != params["scale.W"].shape[1]:
        raise ValueError(f"feature vector must have length {params['scale.W'].shape[1]}")
    layers = [(params[f"base.{k}.W"], params[f"base.{k}.b"]) for k in range(BASE_HIDDEN_LAYERS + 1)]
    v_tilde = fc_forward(layers, h, linear_last=True)
    w = h @ params["scale.W"].T + params["scale.b"]
    b = h @ params["shift.W"].T + params["shift.b"]
    return w * v_tilde + b


# ----------------------------------------------------------------------- loss

def pi_loss_terms(s_true, v_true, v_hat_std, grid: GridModel, scaler: Standardizer):
    """Per-example ``(term1, term2, d_term1, d_term2)``.

    ``scaler`` is the 2N-feature voltage standardizer. ``term1`` is the
    squared error in standardized space; ``term2`` the squared PFE mismatch
    ``s_true - diag(v) Y* v*`` of the de-standardized estimate. The
    gradients are w.r.t. ``v_hat_std``.
    """
    v_hat_std = np.atleast_2d(np.asarray(v_hat_std, dtype=float))
    s_true = np.atleast_2d(np.asarray(s_true, dtype=complex))
    v_true = np.atleast_2d(np.asarray(v_true, dtype=complex))
    n = grid.n_buses
    if v_hat_std.shape[-1] != 2 * n or s_true.shape[-1] != n or v_true.shape[-1] != n:
        raise ValueError("loss inputs do not match the grid size")
    diff = v_hat_std - scaler.apply(to_real(v_true))
    term1 = np.sum(diff ** 2, axis=1)
    d1 = 2.0 * diff

    v = to_complex(scaler.invert(v_hat_std))
    I = v @ grid.Y.T
    r = s_true - v * np.conj(I)
    term2 = np.sum(np.abs(r) ** 2, axis=1)
    # dF/de + j dF/df for F = sum |r|^2
    gc = -2.0 * (r * I + np.conj((r * np.conj(v)) @ grid.Y))
    d2 = to_real(gc) * scaler.std
    return term1, term2, d1, d2


def pi_loss(s_true, v_true, v_hat_std, grid: GridModel, lam: float,
            scaler: Standardizer) -> float:
    """Physics-regularized loss of one example (or the batch mean)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    t1, t2, _, _ = pi_loss_terms(s_true, v_true, v_hat_std, grid, scaler)
    return float(np.mean(t1 + lam * t2))


def loss_and_gradients(params: dict, arch: DnnArchitecture, batch, grid: GridModel, lam: float,
                       scaler: Standardizer):
    """Mean batch loss and its parameter gradients.

    ``batch`` is ``(history_std, partial_std, s_true, v_true)``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    history, partial, s_true, v_true = batch
    v_hat, cache = forward(params, arch, history, partial, with_cache=True)
    t1, t2, d1, d2 = pi_loss_terms(s_true, v_true, v_hat, grid, scaler)
    loss = float(np.mean(t1 + lam * t2))
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss (term1={np.mean(t1):.3e}, "
                                 f"term2={np.mean(t2):.3e})")
    B = v_hat.shape[0]
    d = (d1 + lam * d2) / B if lam else d1 / B
    return loss, backward(params, arch, cache, d), {"term1": float(np.mean(t1)),
                                                    "term2": float(np.mean(t2))}


def gradients(params, arch, batch, grid, lam, scaler) -> dict:
    return loss_and_gradients(params, arch, batch, grid, lam, scaler)[1]
