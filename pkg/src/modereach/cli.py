"""``modereach`` command line: extract, cluster, classify, solve, simulate, slice, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .dynamics import (ReducedRelativeDynamics, RelativeCarDynamics, ToyDynamics1D, VehicleParams)
from .grid import (Dim, GridError, GridSpec, TargetSpec, ValueField, build_grid, interpolate, save_field,
                   signed_distance_rect)
from .modes import (OTHER, ModeSet, TrajectoryError, classify_trajectory, cluster_modes, extract_actions,
                    read_actions_csv, read_trajectory_csv, write_actions_csv)
from .safety import (BundleError, SafetyBundle, build_curb_entry, build_mode_entry, extend_solve)
from .sim import POLICIES, SimConfig, aggregate, crossing_scenario, load_scenarios, run_encounter, write_step_log
from .solver import SolverConfig, SolverError, dissipation_for, solve_brt

log = logging.getLogger("modereach")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SYSTEMS = ("relative5d", "reduced3d", "toy1d")


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


def default_relative_grid() -> GridSpec:
    return GridSpec((Dim(-20.0, 20.0, 31), Dim(-20.0, 20.0, 31), Dim(-math.pi, math.pi, 25, True),
                     Dim(0.0, 10.0, 11), Dim(0.0, 5.0, 11)))


def default_reduced_grid() -> GridSpec:
    return GridSpec((Dim(-20.0, 20.0, 41), Dim(-20.0, 20.0, 41), Dim(-math.pi, math.pi, 25, True)))


def default_robot_grid() -> GridSpec:
    return GridSpec((Dim(-50.0, 50.0, 51), Dim(-50.0, 50.0, 51), Dim(0.0, 5.0, 6),
                     Dim(-math.pi, math.pi, 24, True)))


def default_toy_grid() -> GridSpec:
    return GridSpec((Dim(-4.0, 4.0, 401),))


@dataclass
class RunConfig:
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    relative_grid: GridSpec = field(default_factory=default_relative_grid)
    robot_grid: GridSpec = field(default_factory=default_robot_grid)
    reduced_grid: GridSpec = field(default_factory=default_reduced_grid)
    toy_grid: GridSpec = field(default_factory=default_toy_grid)
    solver: SolverConfig = field(default_factory=SolverConfig)
    system: str = "relative5d"
    reduced_speeds: tuple[float, float] = (6.0, 1.0)
    target: tuple[float, float] = (2.5, 1.25)
    toy_target: float = 1.0
    modes: str | None = None
    bundle: str = "bundle"
    scenario: str | None = None
    curb_map: str | None = None
    out: str = "out"
    seed: int = 0
    threads: int = 1
    margin: float = 0.0
    stanley_gain: float = 1.0

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"system must be one of {SYSTEMS}")
        if self.relative_grid.ndim != 5 or self.robot_grid.ndim != 4 or self.reduced_grid.ndim != 3:
            raise ValueError("grid specs must be 5D relative, 4D robot and 3D reduced")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        kw = dict(d)
        if "vehicle" in kw:
            kw["vehicle"] = VehicleParams.from_dict(kw["vehicle"])
        for g in ("relative_grid", "robot_grid", "reduced_grid", "toy_grid"):
            if g in kw:
                kw[g] = GridSpec.from_dict(kw[g])
        if "solver" in kw:
            kw["solver"] = SolverConfig.from_dict(kw["solver"])
        for t in ("reduced_speeds", "target"):
            if t in kw:
                kw[t] = tuple(float(v) for v in kw[t])
        return cls(**kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["vehicle"] = self.vehicle.to_dict()
        for g in ("relative_grid", "robot_grid", "reduced_grid", "toy_grid"):
            d[g] = d[g].to_dict()
        d["solver"] = self.solver.to_dict()
        d["reduced_speeds"] = list(self.reduced_speeds)
        d["target"] = list(self.target)
        return d


def load_config(args) -> RunConfig:
    d = {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise DataError(f"config file {p} not found")
        d = json.loads(p.read_text())
    if args.seed is not None:
        d["seed"] = args.seed
    if args.threads is not None:
        d["threads"] = args.threads
    if args.out is not None:
        d["out"] = args.out
    cfg = RunConfig.from_dict(d)
    cfg.solver = SolverConfig.from_dict({**cfg.solver.to_dict(), "threads": cfg.threads})
    return cfg


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# extract / cluster / classify

def cmd_extract(args, cfg: RunConfig) -> int:
    src = Path(args.traj_dir)
    files = sorted(src.glob("*.csv")) if src.is_dir() else []
    if not files:
        raise DataError(f"no trajectory CSV files in {src}")
    samples, warnings, skipped = [], 0, []
    for f in files:
        try:
            traj, warns = read_trajectory_csv(f)
            got = extract_actions(traj)
        except (TrajectoryError, ValueError) as e:
            skipped.append(f"{f.name}: {e}")
            continue
        for w in warns:
            print(f"warning: {f.name}: {w}", file=sys.stderr)
        warnings += len(warns)
        samples.extend(got)
    if not samples:
        raise DataError("no usable trajectories: " + "; ".join(skipped))
    out = Path(args.out_csv) if args.out_csv else Path(cfg.out) / "actions.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_actions_csv(samples, out)
    for s in skipped:
        print(f"skipped {s}", file=sys.stderr)
    print(f"{len(samples)} actions from {len(files) - len(skipped)} files -> {out}; "
          f"{warnings} row warnings, {len(skipped)} files skipped")
    return EXIT_OK


def cmd_cluster(args, cfg: RunConfig) -> int:
    try:
        data = read_actions_csv(args.actions_csv)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read {args.actions_csv}: {e}") from e
    if len(data) < 6:
        raise DataError(f"need at least 6 actions to form 6 modes, got {len(data)}")
    modes = cluster_modes(data, seed=cfg.seed)
    out = Path(args.out_modes) if args.out_modes else Path(cfg.out) / "modes.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    modes.save(out)
    print(f"{'mode':>5} {'label':<16} {'size':>6}  a-range            omega-range")
    for m in modes.rect_modes:
        b = m.bounds
        print(f"{m.id:>5} {m.label:<16} {modes.cluster_sizes.get(m.id, 0):>6}  "
              f"[{b.a_min:+.3f}, {b.a_max:+.3f}]  [{b.omega_min:+.3f}, {b.omega_max:+.3f}]")
    lim = modes.physical_limits
    print(f"{OTHER:>5} {'other':<16} {'-':>6}  [{lim.a_min:+.3f}, {lim.a_max:+.3f}]  "
          f"[{lim.omega_min:+.3f}, {lim.omega_max:+.3f}]")
    for r in modes.repairs:
        print(f"repair: {r}", file=sys.stderr)
    print(f"-> {out}")
    return EXIT_OK


def _load_modes(cfg: RunConfig, path=None) -> ModeSet:
    p = path or cfg.modes
    if not p:
        raise DataError("no mode file given (config 'modes' or --modes)")
    if not Path(p).exists():
        raise DataError(f"mode file {p} not found")
    return ModeSet.load(p)


def cmd_classify(args, cfg: RunConfig) -> int:
    modes = _load_modes(cfg, args.modes)
    out = []
    for name in args.trajectories:
        try:
            traj, warns = read_trajectory_csv(name)
            probs = classify_trajectory(traj, modes)
        except (OSError, TrajectoryError, ValueError) as e:
            raise DataError(f"{name}: {e}") from e
        for w in warns:
            print(f"warning: {name}: {w}", file=sys.stderr)
        out.append({"file": str(name), "mode": probs.mode, "p_mode": probs.p_mode,
                    "probabilities": {str(k): v for k, v in sorted(probs.probs.items())}})
        print(f"{name}: mode {probs.mode} (p = {probs.p_mode:.3f})")
    if args.out_json:
        _dump(out, Path(args.out_json))
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve

def _curb_occupancy(cfg: RunConfig, grid) -> np.ndarray:
    """Rasterize the curb map rectangles onto the robot grid's (x, y) plane."""
    if not cfg.curb_map:
        raise DataError("no curb map given (config 'curb_map')")
    p = Path(cfg.curb_map)
    if not p.exists():
        raise DataError(f"curb map {p} not found")
    d = json.loads(p.read_text())
    X, Y = np.meshgrid(grid.coords[0], grid.coords[1], indexing="ij")
    occ = np.zeros(X.shape, dtype=bool)
    for r in d.get("rects", []):
        x0, y0, x1, y1 = (float(v) for v in r)
        occ |= (X >= min(x0, x1)) & (X <= max(x0, x1)) & (Y >= min(y0, y1)) & (Y <= max(y0, y1))
    return occ


def _system_setup(cfg: RunConfig, modes: ModeSet | None, mode_id: int):
    """Grid, terminal field, dynamics for ``mode_id`` and the shared Mode -1 dynamics."""
    if cfg.system == "toy1d":
        grid = build_grid(cfg.toy_grid)
        x = grid.coords[0]
        terminal = ValueField(grid.spec, np.abs(x) - cfg.toy_target, "toy_target")
        dyn = ToyDynamics1D()
        return grid, terminal, dyn, dyn
    if modes is None:
        raise DataError("mode file required for car systems")
    c1, c2 = cfg.target
    if cfg.system == "reduced3d":
        grid = build_grid(cfg.reduced_grid)
        v_h, v_r = cfg.reduced_speeds

        def make(b):
            return ReducedRelativeDynamics(cfg.vehicle, b, v_h, v_r)
    else:
        grid = build_grid(cfg.relative_grid)

        def make(b):
            return RelativeCarDynamics(cfg.vehicle, b)
    terminal = signed_distance_rect(grid, TargetSpec(c1, c2))
    try:
        bounds = modes.bounds_for(mode_id)
    except KeyError as e:
        raise DataError(f"mode {mode_id} not in mode file") from e
    return grid, terminal, make(bounds), make(modes.bounds_for(OTHER))


def cmd_solve(args, cfg: RunConfig) -> int:
    bdir = Path(args.bundle or cfg.bundle)
    if args.target == "curbs":
        grid = build_grid(cfg.robot_grid)
        occ = _curb_occupancy(cfg, grid)
        res, entry = build_curb_entry(grid, occ, cfg.vehicle, cfg.solver)
        results = {"curbs": (res, entry)}
    else:
        try:
            mode_id = int(args.target)
        except ValueError:
            raise DataError(f"solve target must be a mode id or 'curbs', got {args.target!r}") from None
        modes = _load_modes(cfg) if cfg.system != "toy1d" else None
        if cfg.system == "toy1d":
            mode_id = OTHER
        grid, terminal, dyn, worst = _system_setup(cfg, modes, mode_id)
        # every mode shares the Mode -1 scheme so tubes stay nested
        alphas = dissipation_for(grid, worst, cfg.solver)
        res = solve_brt(grid, terminal, dyn, cfg.solver, alphas=alphas, label=f"mode_{mode_id}")
        results = {mode_id: res}
        existing = SafetyBundle.load(bdir) if (bdir / "manifest.json").exists() else None
        if existing is not None and res.converged and cfg.system != "toy1d":
            _align_iterations(existing, mode_id, res, grid, terminal, dyn, worst, cfg, alphas, results, modes)
        dyns = {OTHER: worst, mode_id: dyn}
        results = {k: (r, build_mode_entry(r, dyns[k], None if modes is None else modes.bounds_for(k)))
                   for k, r in results.items()}
    bundle = _open_bundle(bdir, cfg)
    failed = False
    for k, (res, entry) in results.items():
        report = res.report()
        if cfg.system == "toy1d":
            report["zero_level"] = zero_level_1d(res.value)
        entry.report = report
        print(json.dumps(report, indent=2, sort_keys=True))
        if not res.converged:
            failed = True
            stem = "curbs" if k == "curbs" else f"mode_{k}"
            p = bdir / f"{stem}_value.rgvf.unconverged"
            bdir.mkdir(parents=True, exist_ok=True)
            save_field(res.value, p)
            print(f"not converged after {res.iterations} sweeps (change {res.final_change:.3g}); "
                  f"partial field saved to {p}", file=sys.stderr)
            continue
        if k == "curbs":
            bundle.curbs = entry
        else:
            bundle.modes[k] = entry
    bundle.solver = cfg.solver.to_dict()
    bundle.save(bdir)
    return EXIT_NUMERIC if failed else EXIT_OK


def _align_iterations(existing, mode_id, res, grid, terminal, dyn, worst, cfg, alphas, results, modes):
    """Resume Mode -1 (stored or fresh) so it has at least as many sweeps as any stored mode."""
    stored = {k: e.report.get("iterations", 0) for k, e in existing.modes.items()}
    if mode_id == OTHER:
        most = max([v for k, v in stored.items() if k != OTHER] + [0])
        extend_solve(res, grid, terminal, worst, cfg.solver, alphas, most)
    elif OTHER in existing.modes and stored.get(OTHER, 0) < res.iterations:
        from .solver import BrtResult
        e = existing.modes[OTHER]
        base = BrtResult(e.value, stored[OTHER], e.report.get("final_change", 0.0), alphas,
                         e.report.get("metadata", {}).get("elapsed_seconds", 0.0), True,
                         e.report.get("time_reached", 0.0), e.report.get("dt", 0.0),
                         e.report.get("max_increase", 0.0), [])
        extend_solve(base, grid, terminal, worst, cfg.solver, alphas, res.iterations)
        results[OTHER] = base


def _open_bundle(bdir: Path, cfg: RunConfig) -> SafetyBundle:
    if (bdir / "manifest.json").exists():
        b = SafetyBundle.load(bdir)
        if b.vehicle != cfg.vehicle:
            raise DataError(f"bundle {bdir} was built with different vehicle parameters")
        return b
    return SafetyBundle(cfg.vehicle, target=cfg.target, solver=cfg.solver.to_dict())


def zero_level_1d(field: ValueField) -> list[float]:
    """Linear-interpolated zero crossings of a 1D field."""
    x = field.grid().coords[0]
    v = field.values
    out = []
    for i in range(len(v) - 1):
        if (v[i] < 0) != (v[i + 1] < 0):
            out.append(float(x[i] + (x[i + 1] - x[i]) * v[i] / (v[i] - v[i + 1])))
    return out


# ---------------------------------------------------------------------------
# simulate / slice / report

def cmd_simulate(args, cfg: RunConfig) -> int:
    policies = list(POLICIES) if args.policy == "all" else [args.policy]
    modes = _load_modes(cfg, args.modes) if (args.modes or cfg.modes) else None
    bundle = None
    if any(p != "default" for p in policies):
        bdir = Path(args.bundle or cfg.bundle)
        if not (bdir / "manifest.json").exists():
            raise DataError(f"no bundle at {bdir}")
        bundle = SafetyBundle.load(bdir)
        need = [OTHER] + (modes.ids if modes is not None and "reach_pred" in policies else [])
        missing = bundle.missing(need)
        if missing:
            raise DataError(f"bundle lacks tables for modes {missing}")
        if "reach_pred" in policies and modes is None:
            raise DataError("reach_pred needs a mode file")
    if args.crossing:
        if modes is None:
            raise DataError("crossing scenarios need a mode file")
        scenarios = [crossing_scenario(cfg.seed + i, modes) for i in range(args.crossing)]
    else:
        src = args.scenario or cfg.scenario
        if not src or not Path(src).exists():
            raise DataError(f"scenario file {src!r} not found")
        try:
            scenarios = load_scenarios(src)
        except (KeyError, ValueError, TrajectoryError) as e:
            raise DataError(f"bad scenario file {src}: {e}") from e
    out = Path(cfg.out)
    sim_cfg = SimConfig(stanley_gain=cfg.stanley_gain, margin=cfg.margin)
    report = {"policies": {}}
    for pol in policies:
        trials = []
        for sc in scenarios:
            m, rows = run_encounter(sc, pol, bundle, modes, cfg.vehicle, sim_cfg)
            write_step_log(rows, out / "logs" / f"{sc.name}_{pol}.csv")
            trials.append(m)
        report["policies"][pol] = {"trials": [dict(m.to_dict(), scenario=s.name) for m, s in zip(trials, scenarios)],
                                   "aggregate": aggregate(trials)}
    _dump(report, out / "metrics.json")
    print(format_tables(report))
    return EXIT_OK


def format_tables(report: dict) -> str:
    lines = [f"{'policy':<14}{'trials':>7}{'<=0.5m':>8}{'<=1m':>6}{'collide':>9}{'avg dev':>9}"
             f"{'max dev':>9}{'t_car':>8}{'t_curb':>8}"]
    for pol, d in report["policies"].items():
        a = d["aggregate"]
        if not a.get("trials"):
            continue
        lines.append(f"{pol:<14}{a['trials']:>7}{a['trials_le_05']:>8}{a['trials_le_1']:>6}{a['collisions']:>9}"
                     f"{a['mean_avg_deviation']:>9.3f}{a['mean_max_deviation']:>9.3f}"
                     f"{a['mean_t_car']:>8.2f}{a['mean_t_curb']:>8.2f}")
    return "\n".join(lines)


def _fixed_coords(text: str | None) -> dict[int, float]:
    out = {}
    if not text:
        return out
    for part in text.split(","):
        k, _, v = part.partition("=")
        try:
            out[int(k)] = float(v)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad fixed coordinate {part!r}; use DIM=VALUE") from None
    return out


def slice_field(field: ValueField, fixed: dict[int, float]) -> np.ndarray:
    """Rows ``(x, y, V)`` over the grid's first two axes at fixed remaining coordinates."""
    g = field.grid()
    if g.ndim < 2:
        raise DataError("slices need at least 2 dimensions")
    rest = [k for k in range(2, g.ndim)]
    missing = [k for k in rest if k not in fixed]
    if missing:
        raise DataError(f"fixed value needed for dims {missing}")
    for k in rest:
        v = fixed[k]
        if not g.periodic[k] and not (g.lo[k] - 1e-9 <= v <= g.hi[k] + 1e-9):
            raise DataError(f"dim {k} value {v} outside [{g.lo[k]}, {g.hi[k]}]")
    rows = []
    for x in g.coords[0]:
        for y in g.coords[1]:
            state = [x, y] + [fixed[k] for k in rest]
            rows.append((x, y, interpolate(field, state, clamp=False)))
    return np.array(rows)


def cmd_slice(args, cfg: RunConfig) -> int:
    bdir = Path(args.bundle or cfg.bundle)
    if not (bdir / "manifest.json").exists():
        raise DataError(f"no bundle at {bdir}")
    b = SafetyBundle.load(bdir)
    field_ = b.curbs.value if args.mode == "curbs" and b.curbs else b.entry(int(args.mode)).value
    rows = slice_field(field_, _fixed_coords(args.fixed))
    out = Path(args.out_csv) if args.out_csv else Path(cfg.out) / f"slice_{args.mode}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x_rel", "y_rel", "V"])
        for r in rows:
            w.writerow([repr(float(c)) for c in r])
    print(f"{len(rows)} rows, {int(np.sum(rows[:, 2] < 0))} below zero -> {out}")
    return EXIT_OK


def nesting_report(bundle: SafetyBundle, tol: float = 1e-3) -> dict:
    """Containment of every mode tube in the Mode -1 tube, node by node."""
    if OTHER not in bundle.modes:
        raise DataError("nesting check needs Mode -1 in the bundle")
    base = bundle.modes[OTHER].value
    out = {}
    for k, e in sorted(bundle.modes.items()):
        if k == OTHER:
            continue
        if e.value.spec != base.spec:
            raise DataError(f"mode {k} is on a different grid than Mode -1")
        excess = base.values - e.value.values
        out[str(k)] = {"max_excess": float(np.max(excess)),
                       "fraction_ok": float(np.mean(excess <= tol)),
                       "sub_zero_nodes": int(np.sum(e.value.values < 0))}
    out[str(OTHER)] = {"sub_zero_nodes": int(np.sum(base.values < 0))}
    return out


def cmd_report(args, cfg: RunConfig) -> int:
    status = EXIT_OK
    if args.metrics:
        p = Path(args.metrics)
        if not p.exists():
            raise DataError(f"metrics file {p} not found")
        print(format_tables(json.loads(p.read_text())))
    bdir = Path(args.bundle or cfg.bundle)
    if (bdir / "manifest.json").exists():
        b = SafetyBundle.load(bdir)
        for k, e in sorted(b.modes.items()):
            r = e.report
            print(f"mode {k:>2}: {r.get('iterations')} sweeps, change {r.get('final_change', 0):.3g}, "
                  f"converged {r.get('converged')}, max increase {r.get('max_increase')}")
        if b.curbs is not None:
            r = b.curbs.report
            print(f"curbs  : {r.get('iterations')} sweeps, converged {r.get('converged')}")
        if args.nesting:
            nest = nesting_report(b, args.tol)
            print(json.dumps(nest, indent=2, sort_keys=True))
            bad = [k for k, v in nest.items() if v.get("fraction_ok", 1.0) < 1.0]
            if bad:
                print(f"nesting violated for modes {bad}", file=sys.stderr)
                status = EXIT_NUMERIC
            else:
                print("nesting ok")
    elif not args.metrics:
        raise DataError(f"nothing to report: no bundle at {bdir} and no --metrics")
    return status


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="modereach", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--seed", type=int, help="seed for every random draw")
    p.add_argument("--threads", type=int, help="solver threads (1 = canonical order)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("extract", help="recover (a, omega) samples from trajectory CSVs")
    s.add_argument("traj_dir")
    s.add_argument("out_csv", nargs="?")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("cluster", help="cluster actions into six driving modes")
    s.add_argument("actions_csv")
    s.add_argument("out_modes", nargs="?")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("classify", help="mode probabilities of predicted trajectories")
    s.add_argument("trajectories", nargs="+")
    s.add_argument("--modes")
    s.add_argument("--out-json")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("solve", help="solve one mode tube (or the curb tube) into the bundle")
    s.add_argument("target", help="mode id (-1..5) or 'curbs'")
    s.add_argument("--bundle")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("simulate", help="closed-loop encounters")
    s.add_argument("--policy", choices=list(POLICIES) + ["all"], default="all")
    s.add_argument("--scenario")
    s.add_argument("--crossing", type=int, default=0, help="run N generated crossing encounters instead")
    s.add_argument("--bundle")
    s.add_argument("--modes")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("slice", help="2D (x_rel, y_rel) slice of a stored value field")
    s.add_argument("mode", help="mode id or 'curbs'")
    s.add_argument("--fixed", help="fixed coordinates, e.g. 2=0.785,3=6,4=1")
    s.add_argument("--bundle")
    s.add_argument("--out-csv")
    s.set_defaults(func=cmd_slice)

    s = sub.add_parser("report", help="summarize a bundle and/or a metrics file")
    s.add_argument("--bundle")
    s.add_argument("--metrics")
    s.add_argument("--nesting", action="store_true", help="check Mode -1 contains every mode tube")
    s.add_argument("--tol", type=float, default=1e-3)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except argparse.ArgumentTypeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, BundleError, GridError, OSError, json.JSONDecodeError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, SolverError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
