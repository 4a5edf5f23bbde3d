"""Grid dynamic programming for backward reachable tubes.

Each sweep applies a first-order upwind, global Lax-Friedrichs step of the
backward-time HJI variational inequality and then freezes the result so the
value never increases::

    V_next = min(l, V + dt * (H(z, (D- + D+)/2) + sum_i alpha_i (D+_i - D-_i) / 2))
    V_next = min(V_next, V)

Non-periodic boundaries use constant ghost values (zero slope outside the
edge node), which keeps the scheme monotone so tubes of nested input sets
nest at every node; periodic dims wrap.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .dynamics import Dynamics
from .grid import Grid, GridSpec, ValueField, signed_distance_occupancy

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class CFLError(SolverError):
    pass


# global: one alpha per dimension; local: node-wise bounds (less smearing
# across the flow, same CFL step since the global bound is their maximum)
DISSIPATION_SCHEMES = ("global-lax-friedrichs", "local-lax-friedrichs")


@dataclass(frozen=True)
class SolverConfig:
    horizon: float = 10.0
    convergence_tol: float = 1e-3
    cfl_safety: float = 0.8
    spatial_scheme: str = "first-order-upwind"
    dissipation: str = "global-lax-friedrichs"
    # False means the horizon itself is the goal (finite-horizon tube)
    require_convergence: bool = True
    threads: int = 1

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must be in (0, 1]")
        if self.spatial_scheme != "first-order-upwind":
            raise ValueError("only the first-order upwind scheme is implemented")
        if self.dissipation not in DISSIPATION_SCHEMES:
            raise ValueError(f"dissipation must be one of {DISSIPATION_SCHEMES}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class BrtResult:
    value: ValueField
    iterations: int
    final_change: float
    alphas: np.ndarray
    elapsed: float
    converged: bool
    time_reached: float = 0.0
    dt: float = 0.0
    max_increase: float = 0.0
    change_history: list[float] = field(default_factory=list, repr=False)

    def report(self) -> dict:
        return {
            "label": self.value.label,
            "iterations": self.iterations,
            "final_change": self.final_change,
            "converged": self.converged,
            "alphas": [float(a) for a in self.alphas],
            "time_reached": self.time_reached,
            "dt": self.dt,
            "max_increase": self.max_increase,
            "grid_spec": self.value.spec.to_dict(),
            # wall-clock data lives here so the rest of the report is reproducible
            "metadata": {"elapsed_seconds": self.elapsed},
        }

    def report_json(self) -> str:
        return json.dumps(self.report(), indent=2, sort_keys=True)


def estimate_alphas(grid: Grid, dynamics: Dynamics) -> np.ndarray:
    """Per-dimension upper bounds of ``|f_i|`` over the grid and input sets."""
    alphas = np.asarray(dynamics.alphas(grid), dtype=np.float64)
    if alphas.shape != (grid.ndim,):
        raise SolverError(f"dynamics gave {alphas.size} alphas for a {grid.ndim}D grid")
    return alphas


def estimate_local_alphas(grid: Grid, dynamics: Dynamics) -> np.ndarray:
    """Node-wise dissipation bounds, shape ``(grid.size, grid.ndim)``."""
    table = np.ascontiguousarray(dynamics.local_alphas(grid), dtype=np.float64)
    if table.shape != (grid.size, grid.ndim):
        raise SolverError(f"dynamics gave a {table.shape} alpha table for a {grid.shape} grid")
    return table


def dissipation_for(grid: Grid, dynamics: Dynamics, cfg: "SolverConfig") -> np.ndarray:
    """Global alphas or the node-wise table, as selected by ``cfg.dissipation``."""
    if cfg.dissipation == "local-lax-friedrichs":
        return estimate_local_alphas(grid, dynamics)
    return estimate_alphas(grid, dynamics)


def cfl_timestep(grid: Grid, alphas, cfl_safety: float) -> float:
    alphas = np.asarray(alphas, dtype=np.float64)
    if not np.all(np.isfinite(alphas)):
        raise CFLError(f"non-finite dissipation coefficients {alphas}")
    rate = float(np.sum(alphas / grid.spacing))
    if rate <= 0.0:
        raise CFLError("all dissipation coefficients are zero; the field is static")
    return cfl_safety / rate


def lax_friedrichs_hamiltonian(dynamics: Dynamics, state, grad_left, grad_right, alphas) -> float:
    """Numerical Hamiltonian at one node from its one-sided gradients.

    ``H(z, (D- + D+)/2) + sum_i alpha_i (D+_i - D-_i) / 2`` for the
    backward-time update ``V <- V + dt * H_hat``.
    """
    gl = np.asarray(grad_left, dtype=np.float64)
    gr = np.asarray(grad_right, dtype=np.float64)
    H, _ = dynamics.optimize(np.asarray(state, dtype=np.float64), 0.5 * (gl + gr))
    return float(H[0] + np.sum(np.asarray(alphas) * (gr - gl)) * 0.5)


_KERNELS: dict = {}


def _make_sweep(ham, n_out: int):
    """Compile a sweep kernel bound to one node-wise Hamiltonian."""

    @numba.njit(parallel=True, cache=False, error_model="numpy")
    def sweep(V, l, out, shape, dx, periodic, coords, alphas, dt, prm, slab_change, slab_rise):
        nd = shape.size
        n = V.size
        n0 = shape[0]
        inner = n // n0
        strides = np.empty(nd, dtype=np.int64)
        s = 1
        for k in range(nd - 1, -1, -1):
            strides[k] = s
            s *= shape[k]
        cos_t = np.cos(coords)
        sin_t = np.sin(coords)
        for i0 in numba.prange(n0):
            x = np.empty(nd)
            cx = np.empty(nd)
            sx = np.empty(nd)
            no_inputs = np.empty(0)
            p = np.empty(nd)
            idx = np.zeros(nd, dtype=np.int64)
            idx[0] = i0
            worst = 0.0
            rise = -np.inf
            start = i0 * inner
            for flat in range(start, start + inner):
                arow = flat if alphas.shape[0] > 1 else 0
                v0 = V[flat]
                diss = 0.0
                for k in range(nd):
                    i = idx[k]
                    st = strides[k]
                    c = shape[k]
                    if periodic[k]:
                        left = V[flat - st] if i > 0 else V[flat + (c - 1) * st]
                        right = V[flat + st] if i < c - 1 else V[flat - (c - 1) * st]
                        dm = (v0 - left) / dx[k]
                        dp = (right - v0) / dx[k]
                    elif i == 0:
                        dp = (V[flat + st] - v0) / dx[k]
                        dm = 0.0
                    elif i == c - 1:
                        dm = (v0 - V[flat - st]) / dx[k]
                        dp = 0.0
                    else:
                        dm = (v0 - V[flat - st]) / dx[k]
                        dp = (V[flat + st] - v0) / dx[k]
                    p[k] = 0.5 * (dm + dp)
                    diss += alphas[arow, k] * (dp - dm) * 0.5
                    x[k] = coords[k, i]
                    cx[k] = cos_t[k, i]
                    sx[k] = sin_t[k, i]
                h = ham(x, cx, sx, p, prm, no_inputs)
                new = v0 + dt * (h + diss)
                if l[flat] < new:
                    new = l[flat]
                if v0 < new:
                    new = v0
                out[flat] = new
                d = v0 - new
                if d > worst:
                    worst = d
                if new - v0 > rise:
                    rise = new - v0
                # advance the multi-index (last dim fastest)
                k = nd - 1
                while k > 0:
                    idx[k] += 1
                    if idx[k] < shape[k]:
                        break
                    idx[k] = 0
                    k -= 1
            slab_change[i0] = worst
            slab_rise[i0] = rise

    return sweep


def _kernel_for(dynamics: Dynamics):
    key = dynamics.ham
    if key not in _KERNELS:
        _KERNELS[key] = _make_sweep(dynamics.ham, len(dynamics.input_names))
    return _KERNELS[key]


def solve_brt(grid: Grid, terminal: ValueField, dynamics: Dynamics, cfg: SolverConfig = SolverConfig(),
              alphas=None, initial: ValueField | None = None, label: str | None = None,
              max_iterations: int | None = None) -> BrtResult:
    """Integrate the tube backward from ``terminal`` until converged or the horizon cap.

    ``alphas`` overrides the dissipation bounds (needed when comparing solves
    that must share one scheme): a per-dimension vector, or a node-wise
    ``(size, ndim)`` table. ``initial`` resumes from a previous field.
    """
    if terminal.spec != grid.spec:
        raise SolverError("terminal field is not defined on this grid")
    if dynamics.ndim != grid.ndim:
        raise SolverError(f"{dynamics.ndim}D dynamics on a {grid.ndim}D grid")
    label = label if label is not None else terminal.label
    t0 = time.perf_counter()
    table = dissipation_for(grid, dynamics, cfg) if alphas is None else np.asarray(alphas, dtype=np.float64)
    table = np.ascontiguousarray(table.reshape(-1, grid.ndim))
    if table.shape[0] not in (1, grid.size):
        raise SolverError(f"alpha table with {table.shape[0]} rows for {grid.size} nodes")
    if not np.all(np.isfinite(table)):
        raise CFLError("non-finite dissipation coefficients")
    alphas = table.max(axis=0)
    l = np.ascontiguousarray(terminal.values)
    V = np.array(initial.values if initial is not None else l, dtype=np.float64)
    if not np.any(alphas > 0):
        return BrtResult(ValueField(grid.spec, V, label), 0, 0.0, alphas,
                         time.perf_counter() - t0, True, cfg.horizon, 0.0, 0.0, [])

    dt_cfl = cfl_timestep(grid, alphas, cfg.cfl_safety)
    numba.set_num_threads(max(1, min(cfg.threads, numba.config.NUMBA_NUM_THREADS)))
    sweep = _kernel_for(dynamics)
    shape = np.array(grid.shape, dtype=np.int64)
    coords = grid.coord_table()
    prm = dynamics.params()
    nxt = np.empty_like(V)
    slab_change = np.zeros(grid.shape[0])
    slab_rise = np.zeros(grid.shape[0])

    t = 0.0
    it = 0
    change = math.inf
    rise_max = -math.inf
    history: list[float] = []
    converged = False
    while t < cfg.horizon * (1 - 1e-12):
        if max_iterations is not None and it >= max_iterations:
            break
        dt = min(dt_cfl, cfg.horizon - t)
        sweep(V, l, nxt, shape, grid.spacing, grid.periodic, coords, table, dt, prm,
              slab_change, slab_rise)
        change = float(np.max(slab_change))
        rise_max = max(rise_max, float(np.max(slab_rise)))
        if not math.isfinite(change):
            raise SolverError(f"non-finite value after sweep {it}")
        V, nxt = nxt, V
        t += dt
        it += 1
        history.append(change)
        if change < cfg.convergence_tol:
            converged = True
            break
    if not converged and not cfg.require_convergence and t >= cfg.horizon * (1 - 1e-12):
        converged = True
    elapsed = time.perf_counter() - t0
    log.info("solve %s: %d sweeps, t=%.3f, change=%.3g, %.1fs", label, it, t, change, elapsed)
    return BrtResult(ValueField(grid.spec, V, label), it, change if it else 0.0, alphas, elapsed,
                     converged, t, dt_cfl, rise_max if it else 0.0, history)


def solve_curb_brt(grid: Grid, occupancy: np.ndarray, dynamics: Dynamics,
                   cfg: SolverConfig = SolverConfig(), label: str = "curbs") -> BrtResult:
    """Tube of the curb occupancy for the robot alone (``x, y, v, psi`` grid)."""
    terminal = signed_distance_occupancy(grid, occupancy, label=label)
    occ = np.asarray(occupancy, dtype=bool)
    if not occ.any() or occ.all():
        # static field: nothing to propagate
        return BrtResult(terminal, 0, 0.0, estimate_alphas(grid, dynamics), 0.0, True,
                         cfg.horizon, 0.0, 0.0, [])
    return solve_brt(grid, terminal, dynamics, cfg, label=label)


def gradient(field: ValueField) -> np.ndarray:
    """Central-difference gradient at every node, shape ``(size, ndim)``.

    Periodic dims wrap; non-periodic edges use one-sided differences.
    """
    g = field.grid()
    V = field.array
    out = np.empty((g.size, g.ndim))
    for k in range(g.ndim):
        h = g.spacing[k]
        if g.periodic[k]:
            d = (np.roll(V, -1, axis=k) - np.roll(V, 1, axis=k)) / (2 * h)
        else:
            d = np.gradient(V, h, axis=k, edge_order=1)
        out[:, k] = d.ravel()
    return out


def grid_states(grid: Grid) -> np.ndarray:
    return np.stack([m.ravel() for m in grid.mesh()], axis=1)


def save_report(result: BrtResult, path) -> None:
    with open(path, "w") as f:
        f.write(result.report_json())


__all__ = [
    "SolverConfig", "BrtResult", "SolverError", "CFLError", "solve_brt", "solve_curb_brt",
    "estimate_alphas", "estimate_local_alphas", "dissipation_for", "cfl_timestep", "lax_friedrichs_hamiltonian", "gradient", "grid_states",
    "GridSpec",
]
