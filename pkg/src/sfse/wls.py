"""Weighted least-squares baseline with persistence pseudo-measurements.

Missing power phasors at the failure step are replaced by their last known
values, every bus residual is weighted by the inverse of its recent power
fluctuation, and the weighted PFE residual is minimized over all 2N
rectangular voltage components with Levenberg-Marquardt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridModel, ObservabilityMask, pfe_residual
from .power_flow import residual_jacobian

WEIGHT_FLOOR = 1e-6


class LMError(RuntimeError):
    pass


@dataclass(frozen=True)
class LmOptions:
    max_iterations: int = 200
    gtol: float = 1e-10
    xtol: float = 1e-12
    tau: float = 1e-3
    nu: float = 2.0
    gauss_newton_first: bool = True

    def __post_init__(self):
        if min(self.max_iterations, self.gtol, self.xtol, self.tau, self.nu) <= 0:
            raise ValueError("LM options must be positive")


@dataclass
class LmResult:
    x: np.ndarray
    cost: float
    initial_cost: float
    iterations: int
    accepted: int
    gradient_norm: float
    reason: str


def levenberg_marquardt(residual_fn, jacobian_fn, x0, weights=None,
                        opts: LmOptions = LmOptions()) -> LmResult:
    """Minimize ``1/2 sum_k w_k r_k(x)^2``.

    Damping follows Nielsen's rule: ``mu0 = tau * max diag(J^T W J)``, shrink
    by ``max(1/3, 1 - (2 rho - 1)^3)`` on success, multiply by ``nu`` (which
    doubles) on failure. With ``gauss_newton_first`` every iteration first
    tries the minimum-norm undamped step and keeps it when its gain ratio
    exceeds 3/4; steps are only ever accepted if the cost decreases.
    """
    x = np.array(x0, dtype=float)
    r = np.asarray(residual_fn(x), dtype=float)
    w = np.ones_like(r) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != r.shape or np.any(w < 0):
        raise ValueError("weights must be non-negative and match the residual length")
    sw = np.sqrt(w)

    def cost_of(res):
        return 0.5 * float(np.sum(w * res * res))

    cost = initial = cost_of(r)
    J = sw[:, None] * np.asarray(jacobian_fn(x), dtype=float)
    rw = sw * r
    A = J.T @ J
    g = J.T @ rw
    mu = opts.tau * max(float(np.max(np.diag(A), initial=0.0)), np.finfo(float).tiny)
    nu = opts.nu
    it = accepted = 0
    reason = "max_iterations"
    while it < opts.max_iterations:
        if np.max(np.abs(g), initial=0.0) <= opts.gtol:
            reason = "gtol"
            break
        it += 1
        step = None
        if opts.gauss_newton_first:
            h_gn = np.linalg.lstsq(J, -rw, rcond=1e-12)[0]
            trial = x + h_gn
            r_new = np.asarray(residual_fn(trial), dtype=float)
            c_new = cost_of(r_new)
            predicted = -(g @ h_gn) - 0.5 * h_gn @ (A @ h_gn)
            if np.isfinite(c_new) and c_new < cost and predicted > 0 \
                    and (cost - c_new) / predicted > 0.75:
                step = (h_gn, trial, r_new, c_new)
                mu /= 3.0
        if step is None:
            try:
                h = np.linalg.solve(A + mu * np.eye(len(x)), -g)
            except np.linalg.LinAlgError:
                raise LMError(f"singular damped normal matrix (mu={mu:.3e}) "
                              f"at iteration {it}") from None
            if np.linalg.norm(h) <= opts.xtol * (np.linalg.norm(x) + opts.xtol):
                reason = "xtol"
                break
            trial = x + h
            r_new = np.asarray(residual_fn(trial), dtype=float)
            c_new = cost_of(r_new)
            predicted = 0.5 * h @ (mu * h - g)
            rho = (cost - c_new) / predicted if predicted > 0 else -1.0
            if np.isfinite(c_new) and rho > 0 and c_new < cost:
                step = (h, trial, r_new, c_new)
                mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = opts.nu
            else:
                mu *= nu
                nu *= 2.0
                if not np.isfinite(mu) or mu > 1e300:
                    raise LMError(f"damping overflow at iteration {it}; "
                                  f"cost {cost:.3e}, |g| {np.abs(g).max():.3e}")
                continue
        h, x, r, cost = step
        accepted += 1
        J = sw[:, None] * np.asarray(jacobian_fn(x), dtype=float)
        rw = sw * r
        A = J.T @ J
        g = J.T @ rw
        if np.linalg.norm(h) <= opts.xtol * (np.linalg.norm(x) + opts.xtol):
            reason = "xtol"
            break
    return LmResult(x, cost, initial, it, accepted, float(np.max(np.abs(g), initial=0.0)), reason)


# --------------------------------------------------------------- WLS estimator

def persistence_complete(history_s, s_partial, mask: ObservabilityMask | None = None):
    """Fill unobserved power phasors at step t with their values at t-1.

    ``s_partial`` holds NaN for unobserved buses unless an explicit ``mask``
    says which entries are valid.
    """
    history_s = np.asarray(history_s, dtype=complex)
    if history_s.ndim != 2 or history_s.shape[0] == 0:
        raise ValueError("history must contain at least the frame at t-1")
    s_partial = np.asarray(s_partial, dtype=complex)
    observed = ~np.isnan(s_partial) if mask is None else mask.power_observed
    return np.where(observed, s_partial, history_s[-1])


def compute_weights(history_s) -> np.ndarray:
    """Per-bus inverse fluctuation ``1 / (std Re s_i + std Im s_i)``."""
    hs = np.asarray(history_s, dtype=complex)
    if hs.ndim != 2 or hs.shape[0] < 2:
        raise ValueError("weights need at least two history frames")
    spread = hs.real.std(axis=0) + hs.imag.std(axis=0)
    return 1.0 / np.maximum(spread, WEIGHT_FLOOR)


def _pack(v):
    return np.concatenate([v.real, v.imag])


def _unpack(x):
    n = len(x) // 2
    return x[:n] + 1j * x[n:]


def wls_residual(grid: GridModel, s_hat, v_hat) -> np.ndarray:
    """Stacked ``[Re f; Im f]`` of the PFE residual."""
    f = pfe_residual(grid, s_hat, v_hat)
    return np.concatenate([f.real, f.imag])


def wls_jacobian(grid: GridModel, v_hat) -> np.ndarray:
    """Jacobian of :func:`wls_residual` w.r.t. ``[Re v; Im v]`` (2N x 2N)."""
    return residual_jacobian(grid.Y, np.asarray(v_hat, dtype=complex))


def wls_objective(v_hat, s_hat, grid: GridModel, weights) -> float:
    """``1/2 sum_i W_i (Re f_i^2 + Im f_i^2)``."""
    f = pfe_residual(grid, s_hat, v_hat)
    return 0.5 * float(np.sum(np.asarray(weights) * (f.real ** 2 + f.imag ** 2)))


def wls_solve(grid: GridModel, s_hat, weights, v0, opts: LmOptions = LmOptions(),
              fix_slack: bool = False) -> LmResult:
    """Run LM on the weighted PFE residual starting from ``v0``.

    With ``fix_slack`` the slack phasor is held at ``v0`` and only the
    2(N-1) PQ components are free; ``LmResult.x`` always holds all 2N.
    """
    s_hat = np.asarray(s_hat, dtype=complex)
    weights = np.concatenate([np.asarray(weights, dtype=float)] * 2)
    x0 = _pack(np.asarray(v0, dtype=complex))
    n = grid.n_buses
    free = np.arange(2 * n)
    if fix_slack:
        free = np.delete(free, [grid.slack_index, grid.slack_index + n])

    def full(xf):
        x = x0.copy()
        x[free] = xf
        return _unpack(x)

    res = levenberg_marquardt(lambda xf: wls_residual(grid, s_hat, full(xf)),
                              lambda xf: wls_jacobian(grid, full(xf))[:, free],
                              x0[free], weights, opts)
    res.x = _pack(full(res.x))
    return res


def wls_estimate(sequence, grid: GridModel, opts: LmOptions = LmOptions(),
                 scenario: str = "", fix_slack: bool = False) -> np.ndarray:
    """WLS voltage estimate for one SFSE sequence, started from ``v(t-1)``.

    All N phasors are free by default. The PFE are invariant to a common
    rotation of all phasors, so the solution is rotated back to the angle
    reference of the slack bus at ``t-1``; this leaves the objective
    unchanged. ``fix_slack`` pins the slack phasor to its value at ``t-1``.
    """
    s_hat = persistence_complete(sequence.history_s, sequence.s_partial, sequence.mask)
    weights = compute_weights(sequence.history_s)
    v0 = np.asarray(sequence.history_v[-1], dtype=complex)
    try:
        res = wls_solve(grid, s_hat, weights, v0, opts, fix_slack)
    except LMError as err:
        raise LMError(f"{scenario or 'sequence'} t={getattr(sequence, 't', '?')}: {err}") from err
    v = _unpack(res.x)
    k = grid.slack_index
    if abs(v[k]) > 0 and abs(v0[k]) > 0:
        v = v * np.exp(1j * (np.angle(v0[k]) - np.angle(v[k])))
    return v
