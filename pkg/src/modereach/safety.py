"""Safety controller tables and the online mode-switching hybrid controller."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .dynamics import (ActionBounds, Dynamics, RelativeCarDynamics, RelativeState, RobotAction,
                       RobotCurbDynamics, RobotState, VehicleParams)
from .grid import (Grid, GridSpec, TargetSpec, ValueField, field_checksum, load_field,
                   save_field, signed_distance_rect)
from .modes import OTHER, ModeProbabilities, ModeSet
from .solver import BrtResult, SolverConfig, dissipation_for, gradient, grid_states, solve_brt, solve_curb_brt

log = logging.getLogger(__name__)

NOMINAL, AVOID_CAR, AVOID_CURB = "nominal", "avoid_car", "avoid_curb"


class BundleError(KeyError):
    pass


@dataclass(frozen=True)
class ControlTables:
    u_a: ValueField
    u_delta: ValueField


def optimal_control_fields(value: ValueField, dynamics: Dynamics) -> dict[str, ValueField]:
    """Maximizing value of every control input at every node.

    Gradients are central differences of ``value``; keys follow
    ``dynamics.control_names``.
    """
    grid = value.grid()
    _, inputs = dynamics.optimize(grid_states(grid), gradient(value))
    names = dynamics.input_names
    return {c: ValueField(grid.spec, inputs[:, names.index(c)], f"{value.label}_{c}")
            for c in dynamics.control_names}


def extract_controller(value: ValueField, dynamics: Dynamics) -> ControlTables:
    """Store the maximizing robot input at every node of a converged field."""
    fields = optimal_control_fields(value, dynamics)
    spec, tag = value.spec, value.label
    zeros = np.zeros(value.values.size)
    u_a = fields["a_r"].values if "a_r" in fields else zeros
    u_d = fields["delta_f"].values if "delta_f" in fields else zeros
    return ControlTables(ValueField(spec, u_a, f"{tag}_u_a"), ValueField(spec, u_d, f"{tag}_u_delta"))


@numba.njit(cache=True)
def _lookup3(tables, meta, state):
    # one set of multilinear weights shared by the (V, u_a, u_delta) columns of ``tables``
    nd = meta.shape[1]
    base = np.empty(nd, dtype=np.int64)
    upper = np.empty(nd, dtype=np.int64)
    strides = np.empty(nd, dtype=np.int64)
    frac = np.empty(nd)
    clamped = False
    s = 1
    for k in range(nd - 1, -1, -1):
        strides[k] = s
        s *= int(meta[0, k])
    for k in range(nd):
        c = int(meta[0, k])
        u = (state[k] - meta[1, k]) / meta[2, k]
        r = math.floor(u + 0.5)
        if abs(u - r) < 1e-9:
            u = r
        if meta[3, k] != 0.0:
            u = u - math.floor(u / c) * c
            i = int(math.floor(u))
            f = u - i
            if i >= c:
                i = c - 1
                f = 1.0
            base[k] = i
            upper[k] = (i + 1) % c
            frac[k] = f
        else:
            if u < 0.0:
                u = 0.0
                clamped = True
            elif u > c - 1:
                u = float(c - 1)
                clamped = True
            i = int(math.floor(u))
            if i >= c - 1:
                i = c - 2
            base[k] = i
            upper[k] = i + 1
            frac[k] = u - i
    v = 0.0
    a = 0.0
    d = 0.0
    for corner in range(1 << nd):
        w = 1.0
        off = 0
        for k in range(nd):
            if (corner >> k) & 1:
                w *= frac[k]
                off += upper[k] * strides[k]
            else:
                w *= 1.0 - frac[k]
                off += base[k] * strides[k]
        if w != 0.0:
            v += w * tables[off, 0]
            a += w * tables[off, 1]
            d += w * tables[off, 2]
    return v, a, d, clamped


class _Lookup:
    __slots__ = ("tables", "meta")

    def __init__(self, value: ValueField, controls: ControlTables):
        g = value.grid()
        self.tables = np.ascontiguousarray(np.stack([value.values, controls.u_a.values, controls.u_delta.values], axis=1))
        self.meta = np.ascontiguousarray(np.stack([np.asarray(g.shape, dtype=np.float64), g.lo, g.spacing,
                                                   g.periodic.astype(np.float64)]))

    def __call__(self, state: np.ndarray):
        return _lookup3(self.tables, self.meta, state)


@dataclass
class BundleEntry:
    value: ValueField
    controls: ControlTables
    bounds: ActionBounds | None = None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self._lookup = _Lookup(self.value, self.controls)


@dataclass
class SafetyBundle:
    vehicle: VehicleParams
    modes: dict[int, BundleEntry] = field(default_factory=dict)
    curbs: BundleEntry | None = None
    target: tuple[float, float] = (2.5, 1.25)
    solver: dict = field(default_factory=dict)

    def entry(self, mode_id: int) -> BundleEntry:
        try:
            return self.modes[mode_id]
        except KeyError:
            raise BundleError(f"bundle has no tables for mode {mode_id}") from None

    def missing(self, mode_ids) -> list[int]:
        return [m for m in mode_ids if m not in self.modes]

    # -- persistence -------------------------------------------------------
    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {"vehicle": self.vehicle.to_dict(), "target": list(self.target),
                    "solver": self.solver, "modes": {}, "curbs": None}
        for mode_id, e in sorted(self.modes.items()):
            manifest["modes"][str(mode_id)] = _save_entry(e, d, f"mode_{mode_id}")
        if self.curbs is not None:
            manifest["curbs"] = _save_entry(self.curbs, d, "curbs")
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "SafetyBundle":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        b = cls(VehicleParams.from_dict(manifest["vehicle"]), target=tuple(manifest.get("target", (2.5, 1.25))),
                solver=manifest.get("solver", {}))
        for k, info in manifest["modes"].items():
            b.modes[int(k)] = _load_entry(info, d)
        if manifest.get("curbs"):
            b.curbs = _load_entry(manifest["curbs"], d)
        return b

    @staticmethod
    def read_manifest(directory: str | Path) -> dict:
        p = Path(directory) / "manifest.json"
        return json.loads(p.read_text()) if p.exists() else {}


def _save_entry(e: BundleEntry, d: Path, stem: str) -> dict:
    info = {"files": {}, "checksums": {}, "bounds": None if e.bounds is None else e.bounds.to_dict(),
            "report": e.report}
    for name, f in (("value", e.value), ("u_a", e.controls.u_a), ("u_delta", e.controls.u_delta)):
        fname = f"{stem}_{name}.rgvf"
        info["files"][name] = fname
        info["checksums"][name] = save_field(f, d / fname)
    return info


def _load_entry(info: dict, d: Path) -> BundleEntry:
    fields = {}
    for name, fname in info["files"].items():
        f = load_field(d / fname)
        want = info.get("checksums", {}).get(name)
        if want is not None and field_checksum(f) != want:
            raise BundleError(f"checksum mismatch for {fname}")
        fields[name] = f
    b = info.get("bounds")
    return BundleEntry(fields["value"], ControlTables(fields["u_a"], fields["u_delta"]),
                       None if b is None else ActionBounds.from_dict(b), info.get("report", {}))


# ---------------------------------------------------------------------------
# offline products

def solve_mode_family(grid: Grid, modes: ModeSet, vehicle: VehicleParams, cfg: SolverConfig,
                      target: TargetSpec = TargetSpec(2.5, 1.25), mode_ids=None,
                      dynamics_factory=None) -> dict[int, BrtResult]:
    """Solve every mode with one shared scheme so the tubes nest.

    All modes reuse the Mode -1 dissipation bounds and time step. If a mode
    needs more sweeps than Mode -1, Mode -1 is resumed to the same count.
    """
    factory = dynamics_factory or (lambda b: RelativeCarDynamics(vehicle, b))
    mode_ids = sorted(set(modes.ids if mode_ids is None else mode_ids) | {OTHER})
    terminal = signed_distance_rect(grid, target)
    worst = factory(modes.bounds_for(OTHER))
    alphas = dissipation_for(grid, worst, cfg)
    results: dict[int, BrtResult] = {}
    results[OTHER] = solve_brt(grid, terminal, worst, cfg, alphas=alphas, label=f"mode_{OTHER}")
    for m in mode_ids:
        if m == OTHER:
            continue
        results[m] = solve_brt(grid, terminal, factory(modes.bounds_for(m)), cfg, alphas=alphas,
                               label=f"mode_{m}")
    most = max(r.iterations for r in results.values())
    extend_solve(results[OTHER], grid, terminal, worst, cfg, alphas, most)
    return results


def extend_solve(result: BrtResult, grid: Grid, terminal: ValueField, dynamics: Dynamics,
                 cfg: SolverConfig, alphas, target_iterations: int) -> BrtResult:
    """Resume ``result`` in place until it has ``target_iterations`` sweeps.

    A converged field keeps shrinking by less than the tolerance per sweep,
    so stopping it earlier than a narrower mode can break containment.
    """
    more = target_iterations - result.iterations
    if more <= 0:
        return result
    resume = SolverConfig(horizon=1e9, convergence_tol=1e-300, cfl_safety=cfg.cfl_safety,
                          require_convergence=False, threads=cfg.threads)
    extra = solve_brt(grid, terminal, dynamics, resume, alphas=alphas, initial=result.value,
                      label=result.value.label, max_iterations=more)
    result.value = extra.value
    result.iterations += extra.iterations
    result.elapsed += extra.elapsed
    result.time_reached += extra.time_reached
    result.max_increase = max(result.max_increase, extra.max_increase)
    result.change_history += extra.change_history
    if extra.iterations:
        result.final_change = extra.final_change
    return result


def build_mode_entry(result: BrtResult, dynamics: Dynamics, bounds: ActionBounds | None) -> BundleEntry:
    return BundleEntry(result.value, extract_controller(result.value, dynamics), bounds, result.report())


def build_curb_entry(grid: Grid, occupancy: np.ndarray, vehicle: VehicleParams,
                     cfg: SolverConfig) -> tuple[BrtResult, BundleEntry]:
    dyn = RobotCurbDynamics(vehicle)
    res = solve_curb_brt(grid, occupancy, dyn, cfg)
    return res, build_mode_entry(res, dyn, None)


def build_bundle(grid: Grid, curb_grid: Grid, occupancy: np.ndarray, modes: ModeSet,
                 vehicle: VehicleParams, cfg: SolverConfig,
                 target: TargetSpec = TargetSpec(2.5, 1.25)) -> tuple[SafetyBundle, dict]:
    results = solve_mode_family(grid, modes, vehicle, cfg, target)
    bundle = SafetyBundle(vehicle, target=(target.c1, target.c2), solver=cfg.to_dict())
    for m, r in results.items():
        b = modes.bounds_for(m)
        bundle.modes[m] = build_mode_entry(r, RelativeCarDynamics(vehicle, b), b)
    curb_res, bundle.curbs = build_curb_entry(curb_grid, occupancy, vehicle, cfg)
    results = {**{str(k): v for k, v in results.items()}, "curbs": curb_res}
    return bundle, results


# ---------------------------------------------------------------------------
# online filter

@dataclass(frozen=True)
class FilterDecision:
    action: RobotAction
    branch: str
    v_car: float
    v_curb: float
    active_mode: int
    clamped: bool = False


def choose_branch(v_car: float, v_curb: float, margin: float = 0.0) -> str:
    """Three-case switch: nominal when both values clear the margin."""
    if min(v_car, v_curb) > margin:
        return NOMINAL
    if v_car <= v_curb:
        return AVOID_CAR
    return AVOID_CURB


def hybrid_control(z_r: RobotState, z_rel: RelativeState, mode: int, nominal: RobotAction,
                   bundle: SafetyBundle, margin: float = 0.0) -> FilterDecision:
    car = bundle.entry(mode)
    v_car, a_car, d_car, clamp_car = car._lookup(z_rel.as_array())
    if bundle.curbs is not None:
        v_curb, a_curb, d_curb, clamp_curb = bundle.curbs._lookup(z_r.as_array())
    else:
        v_curb, a_curb, d_curb, clamp_curb = math.inf, 0.0, 0.0, False
    branch = choose_branch(v_car, v_curb, margin)
    p = bundle.vehicle
    if branch == NOMINAL:
        action = nominal
    elif branch == AVOID_CAR:
        action = RobotAction(min(max(a_car, p.a_r_min), p.a_r_max), min(max(d_car, p.delta_min), p.delta_max))
    else:
        action = RobotAction(min(max(a_curb, p.a_r_min), p.a_r_max), min(max(d_curb, p.delta_min), p.delta_max))
    return FilterDecision(action, branch, float(v_car), float(v_curb), mode, bool(clamp_car or clamp_curb))


def switch_mode(current: int, classified: ModeProbabilities | None) -> int:
    """Active mode after a new classification (argmax, ties to the lower id)."""
    if classified is None or not classified.probs:
        return current
    return classified.mode


def safety_probability(p_predict: float, p_mode: float) -> float:
    for p in (p_predict, p_mode):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} outside [0, 1]")
    return p_predict * p_mode


__all__ = ["ControlTables", "SafetyBundle", "BundleEntry", "FilterDecision", "extract_controller",
           "optimal_control_fields", "extend_solve", "build_mode_entry", "build_curb_entry",
           "hybrid_control", "switch_mode", "safety_probability", "choose_branch", "solve_mode_family",
           "build_bundle", "GridSpec"]
