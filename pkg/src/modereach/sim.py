"""Closed-loop two-car encounters with path tracking and the safety filter."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import (HumanAction, HumanState, RelativeState, RobotAction, RobotState, VehicleParams,
                       relative_state, wrap_angle)
from .modes import OTHER, ModeSet, Trajectory, action_arrays, classify_trajectory, headings, read_trajectory_csv
from .safety import AVOID_CAR, AVOID_CURB, NOMINAL, SafetyBundle, hybrid_control, switch_mode
from .synthetic import integrate_dubins, sample_mode_actions

log = logging.getLogger(__name__)

POLICIES = ("default", "reach_nopred", "reach_pred")
STANLEY_EPS_V = 0.1
PREDICT_EVERY = 1.0
PREDICT_HORIZON = 3.0


class ReferencePath:
    """Polyline with arc-length parameterization and a constant target speed."""

    def __init__(self, waypoints, target_speed: float = 2.0):
        pts = np.asarray(waypoints, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 2:
            raise ValueError("a path needs at least 2 waypoints")
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths <= 0):
            raise ValueError("consecutive waypoints must be distinct")
        self.points = pts
        self.target_speed = float(target_speed)
        self._seg = seg
        self._len = lengths
        self._s = np.concatenate([[0.0], np.cumsum(lengths)])
        self._heading = np.arctan2(seg[:, 1], seg[:, 0])

    @property
    def length(self) -> float:
        return float(self._s[-1])

    def project(self, x: float, y: float) -> tuple[float, float, float, float]:
        """``(distance, signed cross-track (+ left), path heading, arc length)`` of the nearest point."""
        rel = np.array([x, y]) - self.points[:-1]
        u = np.clip(np.sum(rel * self._seg, axis=1) / self._len ** 2, 0.0, 1.0)
        foot = self.points[:-1] + u[:, None] * self._seg
        d = np.hypot(x - foot[:, 0], y - foot[:, 1])
        i = int(np.argmin(d))
        cross = self._seg[i, 0] * (y - foot[i, 1]) - self._seg[i, 1] * (x - foot[i, 0])
        side = 1.0 if cross >= 0 else -1.0
        return float(d[i]), side * float(d[i]), float(self._heading[i]), float(self._s[i] + u[i] * self._len[i])

    def pose_at(self, s: float) -> tuple[float, float, float]:
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self._s, s, side="right")) - 1, len(self._len) - 1)
        f = (s - self._s[i]) / self._len[i]
        p = self.points[i] + f * self._seg[i]
        return float(p[0]), float(p[1]), float(self._heading[i])


def stanley_steering(s: RobotState, path: ReferencePath, k: float, vehicle: VehicleParams) -> float:
    """Stanley law at the front axle; a car left of the path steers right."""
    fx = s.x + vehicle.l_f * math.cos(s.psi)
    fy = s.y + vehicle.l_f * math.sin(s.psi)
    _, cte, path_psi, _ = path.project(fx, fy)
    heading_error = wrap_angle(path_psi - s.psi)
    delta = heading_error - math.atan2(k * cte, s.v + STANLEY_EPS_V)
    return min(max(delta, vehicle.delta_min), vehicle.delta_max)


@dataclass(frozen=True)
class PIDGains:
    kp: float = 1.0
    ki: float = 0.1
    kd: float = 0.0


@dataclass
class PIDState:
    integral: float = 0.0
    prev_error: float | None = None


def pid_speed(v: float, v_target: float, gains: PIDGains, state: PIDState, dt: float,
              a_min: float, a_max: float) -> float:
    """PID acceleration command; the integrator freezes while the output saturates."""
    e = v_target - v
    deriv = 0.0 if state.prev_error is None else (e - state.prev_error) / dt
    state.prev_error = e
    trial = state.integral + e * dt
    raw = gains.kp * e + gains.ki * trial + gains.kd * deriv
    a = min(max(raw, a_min), a_max)
    if a == raw:
        state.integral = trial
    return a


def rk4_robot(s: RobotState, u: RobotAction, p: VehicleParams, h: float) -> RobotState:
    beta = math.atan(p.l_r / (p.l_f + p.l_r) * math.tan(u.delta))
    sb = math.sin(beta)

    def f(z):
        return np.array([z[2] * math.cos(z[3] + beta), z[2] * math.sin(z[3] + beta), u.a, z[2] / p.l_r * sb])

    z = s.as_array()
    k1 = f(z)
    k2 = f(z + 0.5 * h * k1)
    k3 = f(z + 0.5 * h * k2)
    k4 = f(z + h * k3)
    z = z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return RobotState(float(z[0]), float(z[1]), float(z[2]), wrap_angle(z[3]))


# ---------------------------------------------------------------------------
# human replay

class HumanReplay:
    """Human car driven by a recorded or pre-generated trajectory."""

    def __init__(self, traj: Trajectory, actions: np.ndarray | None = None):
        self.traj = traj
        self.psi = traj.psi if traj.psi is not None else headings(traj)
        if actions is None:
            a, w = action_arrays(traj)
            actions = np.stack([a, w], axis=1)
            # interior actions only; pad the ends with their neighbours
            actions = np.vstack([actions[:1], actions, actions[-1:]])
        self.actions = np.asarray(actions, dtype=np.float64)
        self.extrapolated = 0

    def __call__(self, t: float) -> tuple[HumanState, HumanAction]:
        tr = self.traj
        t_rel = t - tr.t[0]
        u = t_rel / tr.dt
        n = len(tr)
        r = round(u)
        if abs(u - r) < 1e-9:
            u = float(r)
        if u >= n - 1:
            if u > n - 1:
                self.extrapolated += 1
                log.debug("t=%.2f beyond trajectory %r; constant-velocity extrapolation", t, tr.name)
            extra = (u - (n - 1)) * tr.dt
            psi = self.psi[-1]
            st = HumanState(tr.x[-1] + tr.v[-1] * extra * math.cos(psi),
                            tr.y[-1] + tr.v[-1] * extra * math.sin(psi), tr.v[-1], wrap_angle(psi))
            return st, HumanAction(0.0, 0.0)
        i = max(int(math.floor(u)), 0)
        f = u - i
        dpsi = wrap_angle(self.psi[i + 1] - self.psi[i])
        st = HumanState(tr.x[i] + f * (tr.x[i + 1] - tr.x[i]), tr.y[i] + f * (tr.y[i + 1] - tr.y[i]),
                        tr.v[i] + f * (tr.v[i + 1] - tr.v[i]), wrap_angle(self.psi[i] + f * dpsi))
        k = min(i, len(self.actions) - 1)
        return st, HumanAction(float(self.actions[k, 0]), float(self.actions[k, 1]))


def replay_human(traj: Trajectory, t: float) -> tuple[HumanState, HumanAction]:
    return HumanReplay(traj)(t)


# ---------------------------------------------------------------------------
# scenarios and metrics

@dataclass
class HumanSource:
    replay: Trajectory | None = None
    mode: int | None = None
    seed: int = 0
    start: HumanState | None = None
    hold: float = 0.5

    def build(self, modes: ModeSet | None, duration: float, dt: float,
              vehicle: VehicleParams) -> HumanReplay:
        if self.replay is not None:
            return HumanReplay(self.replay)
        if self.mode is None or self.start is None or modes is None:
            raise ValueError("a sampled human needs a mode, a start state and the mode set")
        bounds = modes.bounds_for(self.mode)
        horizon = duration + PREDICT_HORIZON + dt
        acts = sample_mode_actions(bounds, horizon, self.seed, self.hold, dt)
        s = self.start
        traj = integrate_dubins(s.x, s.y, s.v, s.psi, acts, dt,
                                v_limits=(vehicle.v_h_min, vehicle.v_h_max), name=f"sampled_mode{self.mode}")
        return HumanReplay(traj, np.vstack([acts, acts[-1:]]))


@dataclass
class Scenario:
    path: ReferencePath
    start_offset: float
    human: HumanSource
    duration: float = 10.0
    step: float = 0.1
    name: str = ""

    def __post_init__(self):
        n = self.duration / self.step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("step must divide duration")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.step))


@dataclass
class SimMetrics:
    steps: int = 0
    count_le_05: int = 0
    count_le_1: int = 0
    avg_deviation: float = 0.0
    max_deviation: float = 0.0
    steps_car: int = 0
    steps_curb: int = 0
    steps_nominal: int = 0
    step: float = 0.1
    collided: bool = False
    min_distance: float = math.inf
    clamped_lookups: int = 0
    mode_switches: int = 0

    @property
    def t_car(self) -> float:
        return self.steps_car * self.step

    @property
    def t_curb(self) -> float:
        return self.steps_curb * self.step

    @property
    def t_nominal(self) -> float:
        return self.steps_nominal * self.step

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(t_car=self.t_car, t_curb=self.t_curb, t_nominal=self.t_nominal)
        return d


@dataclass
class SimConfig:
    stanley_gain: float = 1.0
    pid: PIDGains = field(default_factory=PIDGains)
    margin: float = 0.0
    predict_every: float = PREDICT_EVERY
    predict_horizon: float = PREDICT_HORIZON


LOG_COLUMNS = ["t", "x_r", "y_r", "v_r", "psi_r", "x_h", "y_h", "v_h", "psi_h", "branch", "mode",
               "v_car", "v_curb", "a_r", "delta_f", "deviation", "distance"]


def in_target(z: RelativeState, c1: float, c2: float) -> bool:
    return abs(z.x_rel) <= c1 and abs(z.y_rel) <= c2


def run_encounter(sc: Scenario, policy: str, bundle: SafetyBundle | None, modes: ModeSet | None,
                  vehicle: VehicleParams | None = None, cfg: SimConfig = SimConfig()) -> tuple[SimMetrics, list[list]]:
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if policy != "default":
        if bundle is None:
            raise ValueError(f"policy {policy} needs a safety bundle")
        needed = [OTHER] if policy == "reach_nopred" else (modes.ids if modes else [OTHER])
        missing = bundle.missing(needed)
        if missing:
            raise ValueError(f"bundle lacks tables for modes {missing}")
    vehicle = vehicle or (bundle.vehicle if bundle else VehicleParams())
    c1, c2 = bundle.target if bundle else (2.5, 1.25)
    human = sc.human.build(modes, sc.duration, sc.step, vehicle)
    x0, y0, psi0 = sc.path.pose_at(sc.start_offset)
    robot = RobotState(x0, y0, sc.path.target_speed, psi0)
    pid = PIDState()
    metrics = SimMetrics(step=sc.step)
    rows: list[list] = []
    mode = OTHER
    every = max(1, int(round(cfg.predict_every / sc.step)))
    window = int(round(cfg.predict_horizon / sc.step))
    dev_sum = 0.0
    for k in range(sc.n_steps):
        t = k * sc.step
        h_state, _ = human(t)
        z_rel = relative_state(robot, h_state)
        dist = math.hypot(h_state.x - robot.x, h_state.y - robot.y)
        dev = sc.path.project(robot.x, robot.y)[0]
        delta = stanley_steering(robot, sc.path, cfg.stanley_gain, vehicle)
        a = pid_speed(robot.v, sc.path.target_speed, cfg.pid, pid, sc.step, vehicle.a_r_min, vehicle.a_r_max)
        nominal = RobotAction(a, delta)
        v_car = v_curb = math.nan
        if policy == "default":
            action, branch = nominal, NOMINAL
        else:
            if policy == "reach_pred" and k % every == 0:
                new_mode = _predict_mode(human, t, window, sc.step, modes, mode)
                if new_mode != mode and k:
                    metrics.mode_switches += 1
                mode = new_mode
            active = OTHER if policy == "reach_nopred" else mode
            dec = hybrid_control(robot, z_rel, active, nominal, bundle, cfg.margin)
            action, branch, v_car, v_curb = dec.action, dec.branch, dec.v_car, dec.v_curb
            metrics.clamped_lookups += int(dec.clamped)
        metrics.steps += 1
        metrics.count_le_05 += dist <= 0.5
        metrics.count_le_1 += dist <= 1.0
        metrics.min_distance = min(metrics.min_distance, dist)
        metrics.collided |= bool(in_target(z_rel, c1, c2))
        metrics.steps_car += branch == AVOID_CAR
        metrics.steps_curb += branch == AVOID_CURB
        metrics.steps_nominal += branch == NOMINAL
        dev_sum += dev
        metrics.max_deviation = max(metrics.max_deviation, dev)
        rows.append([round(t, 10), robot.x, robot.y, robot.v, robot.psi, h_state.x, h_state.y, h_state.v,
                     h_state.psi, branch, mode if policy == "reach_pred" else (OTHER if policy == "reach_nopred" else ""),
                     v_car, v_curb, action.a, action.delta, dev, dist])
        robot = rk4_robot(robot, action, vehicle, sc.step)
        robot = RobotState(robot.x, robot.y, min(max(robot.v, vehicle.v_r_min), vehicle.v_r_max), robot.psi)
    metrics.avg_deviation = dev_sum / max(metrics.steps, 1)
    return metrics, rows


def _predict_mode(human: HumanReplay, t: float, window: int, step: float, modes: ModeSet, current: int) -> int:
    """Classify the human's next ``window`` steps (the prediction is exact replay)."""
    tr = human.traj
    i0 = int(round((t - tr.t[0]) / tr.dt))
    i1 = min(i0 + window + 1, len(tr))
    if i1 - i0 < 3:
        return current
    return switch_mode(current, classify_trajectory(tr.window(i0, i1), modes))


def write_step_log(rows: Sequence[Sequence], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([repr(c) if isinstance(c, float) else c for c in r])


def aggregate(metrics: Sequence[SimMetrics]) -> dict:
    """Batch statistics shaped like the collision, deviation and controller-time tables."""
    n = len(metrics)
    if n == 0:
        return {"trials": 0}
    return {
        "trials": n,
        "trials_le_05": sum(m.count_le_05 > 0 for m in metrics),
        "trials_le_1": sum(m.count_le_1 > 0 for m in metrics),
        "collisions": sum(m.collided for m in metrics),
        "mean_avg_deviation": float(np.mean([m.avg_deviation for m in metrics])),
        "mean_max_deviation": float(np.mean([m.max_deviation for m in metrics])),
        "mean_t_car": float(np.mean([m.t_car for m in metrics])),
        "mean_t_curb": float(np.mean([m.t_curb for m in metrics])),
    }


# ---------------------------------------------------------------------------
# scenario files

def load_scenarios(path: str | Path) -> list[Scenario]:
    """Expand a scenario JSON file into one :class:`Scenario` per start offset."""
    path = Path(path)
    d = json.loads(path.read_text())
    ref = ReferencePath(d["robot_path"], d.get("target_speed", 2.0))
    hs = d["human"]
    if "replay" in hs:
        traj, warns = read_trajectory_csv(path.parent / hs["replay"])
        for w in warns:
            log.warning(w)
        source = lambda: HumanSource(replay=traj)  # noqa: E731
    else:
        smp = hs["sampled"]
        st = smp["start"]
        start = HumanState(float(st["x"]), float(st["y"]), float(st["v"]), float(st["psi"]))
        source = lambda: HumanSource(mode=int(smp["mode"]), seed=int(smp.get("seed", 0)), start=start,  # noqa: E731
                                     hold=float(smp.get("hold", 0.5)))
    offsets = d.get("start_offsets", [0.0])
    return [Scenario(ref, float(o), source(), float(d.get("duration", 10.0)), float(d.get("step", 0.1)),
                     f"{path.stem}_{i}") for i, o in enumerate(offsets)]


def crossing_scenario(seed: int, modes: ModeSet, duration: float = 10.0, mode: int | None = None,
                      vehicle: VehicleParams | None = None, jitter: float = 0.5) -> Scenario:
    """Robot on a straight east-bound path; a sampled human crosses it from the south.

    The human's actions are drawn first, then the robot start is placed so
    that it reaches the point where the human comes closest to the path
    line at the same moment (up to ``jitter`` meters along the path).
    """
    vehicle = vehicle or VehicleParams()
    rng = np.random.default_rng(seed)
    mode = int(rng.integers(0, 6)) if mode is None else mode
    v_h = float(rng.uniform(3.0, 6.0))
    t_cross = float(rng.uniform(2.0, 3.5))
    heading = math.pi / 2 + float(rng.uniform(-0.3, 0.3))
    d_h = v_h * t_cross
    start = HumanState(-d_h * math.cos(heading), -d_h * math.sin(heading), v_h, heading)
    human = HumanSource(mode=mode, seed=seed, start=start)
    traj = human.build(modes, duration, 0.1, vehicle).traj
    n = int(round(duration / 0.1))
    k_lo = int(round(1.0 / 0.1))
    k = k_lo + int(np.argmin(np.abs(traj.y[k_lo:n - k_lo])))
    speed = 2.0
    path = ReferencePath([[-100.0, 0.0], [100.0, 0.0]], speed)
    offset = 100.0 + traj.x[k] - speed * k * 0.1 + float(rng.uniform(-jitter, jitter))
    return Scenario(path, offset, human, duration, 0.1, f"crossing_{seed}")
