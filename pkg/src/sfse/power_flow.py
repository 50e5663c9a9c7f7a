"""Newton-Raphson AC power flow in rectangular coordinates.

The network is one slack bus plus PQ buses. Unknowns are the real and
imaginary voltage parts of every PQ bus, stacked as ``[e_pq, f_pq]``; the
mismatch is stacked the same way as ``[Re F_pq, Im F_pq]`` with
``F = s_target - diag(v) Y* v*``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridModel, pfe_residual


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, mismatch: float = np.nan, iterations: int = 0):
        super().__init__(message)
        self.mismatch = mismatch
        self.iterations = iterations


@dataclass(frozen=True)
class PowerFlowOptions:
    max_iterations: int = 50
    tolerance: float = 1e-10
    slack_voltage: complex = 1 + 0j

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray
    iterations: int
    final_mismatch: float


def injection_derivatives(Y: np.ndarray, v: np.ndarray):
    """Partial derivatives of ``s = diag(v) Y* v*`` w.r.t. ``Re v`` and ``Im v``.

    Returns complex matrices ``(dS_de, dS_df)`` of shape N x N.
    """
    conj_I = np.conj(Y @ v)
    vY = v[:, None] * np.conj(Y)
    dS_de = vY + np.diag(conj_I)
    dS_df = 1j * (np.diag(conj_I) - vY)
    return dS_de, dS_df


def residual_jacobian(Y: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Real Jacobian of the stacked mismatch ``[Re F; Im F]`` w.r.t. ``[e; f]``.

    Covers all buses (2N x 2N). Since ``F = s_target - s(v)`` the sign is
    negative of the injection derivatives.
    """
    dS_de, dS_df = injection_derivatives(Y, v)
    return -np.block([[dS_de.real, dS_df.real], [dS_de.imag, dS_df.imag]])


def pf_jacobian(grid: GridModel, v) -> np.ndarray:
    """Mismatch Jacobian restricted to the PQ buses, 2(N-1) x 2(N-1)."""
    v = np.asarray(v, dtype=complex)
    if v.shape != (grid.n_buses,):
        raise ValueError(f"v must have shape ({grid.n_buses},), got {v.shape}")
    n = grid.n_buses
    pq = grid.pq_buses
    rows = np.concatenate([pq, pq + n])
    return residual_jacobian(grid.Y, v)[np.ix_(rows, rows)]


def _stacked_mismatch(grid, s_target, v, pq):
    F = pfe_residual(grid, s_target, v)[pq]
    return np.concatenate([F.real, F.imag])


def solve_power_flow(grid: GridModel, injections, opts: PowerFlowOptions | None = None,
                     v0=None) -> PowerFlowSolution:
    """Solve for all bus voltages given PQ injections.

    The slack entry of ``injections`` is ignored; the slack voltage is held at
    ``opts.slack_voltage``. ``v0`` overrides the flat start (warm start).
    """
    opts = opts or PowerFlowOptions()
    n = grid.n_buses
    s = np.asarray(injections, dtype=complex)
    if s.shape != (n,):
        raise ValueError(f"injections must have shape ({n},), got {s.shape}")
    pq = grid.pq_buses
    m = len(pq)
    if v0 is None:
        v = np.full(n, complex(opts.slack_voltage))
    else:
        v = np.array(v0, dtype=complex)
        v[grid.slack_index] = opts.slack_voltage

    F = _stacked_mismatch(grid, s, v, pq)
    mismatch = np.max(np.abs(F), initial=0.0)
    it = 0
    while mismatch > opts.tolerance:
        if it >= opts.max_iterations:
            raise PowerFlowError(f"no convergence after {it} iterations "
                                 f"(mismatch {mismatch:.3e})", mismatch, it)
        J = pf_jacobian(grid, v)
        try:
            dx = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            raise PowerFlowError(f"singular Jacobian at iteration {it}", mismatch, it) from None
        v[pq] -= dx[:m] + 1j * dx[m:]
        it += 1
        F = _stacked_mismatch(grid, s, v, pq)
        mismatch = np.max(np.abs(F), initial=0.0)
        if not np.isfinite(mismatch):
            raise PowerFlowError(f"diverged at iteration {it}", mismatch, it)
    return PowerFlowSolution(v, it, float(mismatch))


def solve_time_series(grid: GridModel, injections, opts: PowerFlowOptions | None = None,
                      warm_start: bool = False):
    """Solve every row of a (steps, N) injection array.

    Returns ``(s, v, iterations)``: the slack entries of ``s`` are replaced by
    the back-computed slack injection so every frame satisfies the PFE.
    """
    from .grid import pfe_injections

    opts = opts or PowerFlowOptions()
    injections = np.asarray(injections, dtype=complex)
    steps = injections.shape[0]
    V = np.empty_like(injections)
    iters = np.empty(steps, dtype=int)
    prev = None
    for k in range(steps):
        sol = solve_power_flow(grid, injections[k], opts, v0=prev if warm_start else None)
        V[k] = sol.v
        iters[k] = sol.iterations
        prev = sol.v
    S = injections.copy()
    S[:, grid.slack_index] = pfe_injections(grid, V)[:, grid.slack_index]
    return S, V, iters
