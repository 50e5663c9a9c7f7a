"""Grid model, bus admittance assembly and the AC power-flow equations.

Everything here works in per-unit. Complex bus vectors are plain 1-D
``complex128`` arrays; when a real representation is needed they are flattened
to interleaved ``[Re z1, Im z1, ..., Re zN, Im zN]`` pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


class CaseFileError(ValueError):
    """Raised when a case file is malformed; ``field`` names the offender."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    series_admittance: complex
    shunt_admittance_half: complex = 0j


@dataclass(frozen=True, eq=False)
class ObservabilityMask:
    """Which buses report power and voltage phasors at the masked time step."""

    power_observed: np.ndarray
    voltage_observed: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.power_observed, dtype=bool)
        v = np.asarray(self.voltage_observed, dtype=bool)
        if p.shape != v.shape or p.ndim != 1:
            raise ValueError("power and voltage masks must be 1-D and equally long")
        object.__setattr__(self, "power_observed", p)
        object.__setattr__(self, "voltage_observed", v)

    def __eq__(self, other):
        if not isinstance(other, ObservabilityMask):
            return NotImplemented
        return (np.array_equal(self.power_observed, other.power_observed)
                and np.array_equal(self.voltage_observed, other.voltage_observed))

    __hash__ = None

    @property
    def n_buses(self) -> int:
        return len(self.power_observed)

    @property
    def n_s(self) -> int:
        return int(self.power_observed.sum())

    @property
    def n_v(self) -> int:
        return int(self.voltage_observed.sum())

    @property
    def observability(self) -> float:
        return observability(self.n_s, self.n_v, self.n_buses)

    @classmethod
    def by_index(cls, n_buses: int, n_s: int, n_v: int = 0) -> "ObservabilityMask":
        """Mask where the highest-numbered buses lose reporting first."""
        if not (0 <= n_s <= n_buses and 0 <= n_v <= n_buses):
            raise ValueError(f"counts ({n_s}, {n_v}) out of range for {n_buses} buses")
        idx = np.arange(n_buses)
        return cls(idx < n_s, idx < n_v)

    @classmethod
    def full(cls, n_buses: int) -> "ObservabilityMask":
        return cls.by_index(n_buses, n_buses, n_buses)

    def to_dict(self) -> dict:
        return {
            "power_observed": [int(i) for i in np.flatnonzero(self.power_observed)],
            "voltage_observed": [int(i) for i in np.flatnonzero(self.voltage_observed)],
            "n_buses": self.n_buses,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObservabilityMask":
        n = d["n_buses"]
        p = np.zeros(n, dtype=bool)
        v = np.zeros(n, dtype=bool)
        p[d["power_observed"]] = True
        v[d["voltage_observed"]] = True
        return cls(p, v)


@dataclass(frozen=True)
class GridModel:
    Y: np.ndarray
    slack_index: int = 0
    base_voltage_kv: float = 4.8
    base_power_mva: float = 1.0
    branches: tuple = field(default=(), repr=False, compare=False)
    name: str = ""

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=complex)
        if Y.ndim != 2 or Y.shape[0] != Y.shape[1]:
            raise ValueError(f"admittance matrix must be square, got {Y.shape}")
        if not 0 <= self.slack_index < Y.shape[0]:
            raise ValueError(f"slack index {self.slack_index} outside 0..{Y.shape[0] - 1}")
        if self.base_voltage_kv <= 0 or self.base_power_mva <= 0:
            raise ValueError("base quantities must be positive")
        Y.setflags(write=False)
        object.__setattr__(self, "Y", Y)

    @property
    def n_buses(self) -> int:
        return self.Y.shape[0]

    @property
    def pq_buses(self) -> np.ndarray:
        return np.delete(np.arange(self.n_buses), self.slack_index)

    @property
    def base_impedance_ohm(self) -> float:
        return self.base_voltage_kv**2 / self.base_power_mva


def _check_connected(n_buses: int, edges) -> None:
    parent = list(range(n_buses))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for f, t in edges:
        parent[find(f)] = find(t)
    roots = {find(i) for i in range(n_buses)}
    if len(roots) != 1:
        raise ValueError(f"branch list does not connect all {n_buses} buses "
                         f"({len(roots)} islands)")


def build_admittance(branches, n_buses: int) -> np.ndarray:
    """Assemble the bus admittance matrix from a pi-model branch list.

    Parallel branches between the same pair of buses are summed.
    """
    if n_buses < 1:
        raise ValueError("n_buses must be positive")
    Y = np.zeros((n_buses, n_buses), dtype=complex)
    edges = []
    for br in branches:
        if not isinstance(br, Branch):
            br = Branch(*br)
        f, t = int(br.from_bus), int(br.to_bus)
        if not (0 <= f < n_buses and 0 <= t < n_buses):
            raise ValueError(f"branch ({f}, {t}) references a bus outside 0..{n_buses - 1}")
        if f == t:
            raise ValueError(f"self-loop at bus {f}")
        y = complex(br.series_admittance)
        ysh = complex(br.shunt_admittance_half)
        Y[f, f] += y + ysh
        Y[t, t] += y + ysh
        Y[f, t] -= y
        Y[t, f] -= y
        edges.append((f, t))
    _check_connected(n_buses, edges)
    return Y


def _as_vec(x, n: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    if x.shape[-1] != n:
        raise ValueError(f"{name} has length {x.shape[-1]}, expected {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def pfe_injections(grid: GridModel, v) -> np.ndarray:
    """Complex power injections ``s = diag(v) Y* v*``.

    ``v`` may carry leading batch dimensions; the bus axis is last.
    """
    v = _as_vec(v, grid.n_buses, "v")
    return v * np.conj(v @ grid.Y.T)


def pfe_residual(grid: GridModel, s_target, v) -> np.ndarray:
    """Power mismatch ``s_target - diag(v) Y* v*``."""
    s_target = _as_vec(s_target, grid.n_buses, "s_target")
    return s_target - pfe_injections(grid, v)


def observability(n_s: int, n_v: int, n_buses: int) -> float:
    """Fraction of phasor quantities reported at a time step."""
    if n_buses < 1:
        raise ValueError("n_buses must be positive")
    if not (0 <= n_s <= n_buses and 0 <= n_v <= n_buses):
        raise ValueError(f"observable counts ({n_s}, {n_v}) exceed {n_buses} buses")
    return (n_s + n_v) / (2 * n_buses)


def to_real(z) -> np.ndarray:
    """Interleave real and imaginary parts along the last axis."""
    z = np.asarray(z, dtype=complex)
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def to_complex(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] % 2:
        raise ValueError("interleaved vector must have even length")
    return x[..., 0::2] + 1j * x[..., 1::2]


# ---------------------------------------------------------------- case files

def grid_from_dict(data: dict) -> GridModel:
    for key in ("n_buses", "slack_index", "base_kv", "base_mva", "branches"):
        if key not in data:
            raise CaseFileError(f"case file is missing '{key}'", key)
    n = data["n_buses"]
    if not isinstance(n, int) or n < 1:
        raise CaseFileError(f"'n_buses' must be a positive integer, got {n!r}", "n_buses")
    slack = data["slack_index"]
    if not isinstance(slack, int) or not 0 <= slack < n:
        raise CaseFileError(f"'slack_index' {slack!r} outside 0..{n - 1}", "slack_index")
    for key in ("base_kv", "base_mva"):
        if not isinstance(data[key], (int, float)) or data[key] <= 0:
            raise CaseFileError(f"'{key}' must be a positive number", key)
    branches = []
    for k, br in enumerate(data["branches"]):
        for key in ("from", "to", "g", "b"):
            if key not in br:
                raise CaseFileError(f"branch {k} is missing '{key}'", f"branches[{k}].{key}")
        f, t = br["from"], br["to"]
        for key, bus in (("from", f), ("to", t)):
            if not isinstance(bus, int) or not 0 <= bus < n:
                raise CaseFileError(f"branch {k} '{key}' bus {bus!r} outside 0..{n - 1}",
                                    f"branches[{k}].{key}")
        if f == t:
            raise CaseFileError(f"branch {k} is a self-loop", f"branches[{k}]")
        branches.append(Branch(f, t, complex(br["g"], br["b"]),
                               complex(0.0, br.get("shunt_b", 0.0) / 2)))
    try:
        Y = build_admittance(branches, n)
    except ValueError as err:
        raise CaseFileError(str(err), "branches") from err
    return GridModel(Y, slack, float(data["base_kv"]), float(data["base_mva"]),
                     tuple(branches), data.get("name", ""))


def load_case(path) -> GridModel:
    """Load a JSON case file (``n_buses, slack_index, base_kv, base_mva, branches``).

    ``path`` is either a file path or the name of a bundled case
    (``"ieee37"``, ``"case4_dist"``).
    """
    p = Path(path)
    if not p.exists() and p.suffix == "":
        p = Path(str(resources.files("sfse") / "cases" / f"{path}.json"))
    try:
        data = json.loads(p.read_text())
    except FileNotFoundError:
        raise CaseFileError(f"case file not found: {path}", "path") from None
    except json.JSONDecodeError as err:
        raise CaseFileError(f"case file is not valid JSON: {err}", "json") from err
    if not isinstance(data, dict):
        raise CaseFileError("case file must hold a JSON object", "json")
    return grid_from_dict(data)
