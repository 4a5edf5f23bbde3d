"""Vehicle models, the robot-frame relative system and Hamiltonian optimization.

Human car: extended Dubins car ``(x, y, v, psi)`` driven by ``(a, omega)``.
Robot car: kinematic bicycle ``(x, y, v, psi)`` driven by ``(a, delta_f)``.
Relative state: ``(x_rel, y_rel, psi_rel, v_h, v_r)`` in the robot frame.

In the reachability game the robot input maximizes ``grad V . f`` and the
human input, treated as a disturbance, minimizes it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numba
import numpy as np

from .grid import Grid

N_STEER_CANDIDATES = 21


def wrap_angle(x):
    """Wrap angles into ``[-pi, pi)``; works on scalars and arrays."""
    w = np.mod(np.asarray(x, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w >= np.pi, w - 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class ActionBounds:
    a_min: float
    a_max: float
    omega_min: float
    omega_max: float

    def __post_init__(self):
        if self.a_min > self.a_max or self.omega_min > self.omega_max:
            raise ValueError(f"empty action bounds {self}")

    def contains(self, a: float, omega: float) -> bool:
        return self.a_min <= a <= self.a_max and self.omega_min <= omega <= self.omega_max

    def contains_bounds(self, other: "ActionBounds") -> bool:
        return (self.a_min <= other.a_min and other.a_max <= self.a_max
                and self.omega_min <= other.omega_min and other.omega_max <= self.omega_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ActionBounds":
        return cls(float(d["a_min"]), float(d["a_max"]), float(d["omega_min"]), float(d["omega_max"]))


def steering_limit_for_turn_rate(omega: float, v_ref: float, l_f: float, l_r: float) -> float:
    """Steering angle whose yaw rate at ``v_ref`` equals ``omega``."""
    s = min(abs(omega) * l_r / v_ref, 1.0)
    beta = math.asin(s)
    return math.atan(math.tan(beta) * (l_f + l_r) / l_r)


DEFAULT_HUMAN_LIMITS = ActionBounds(-2.5, 2.5, -0.5, 0.5)
REFERENCE_SPEED = 2.0
_DEFAULT_DELTA = steering_limit_for_turn_rate(0.5, REFERENCE_SPEED, 1.5, 1.5)


@dataclass(frozen=True)
class VehicleParams:
    l_f: float = 1.5
    l_r: float = 1.5
    a_r_min: float = -4.0
    a_r_max: float = 3.0
    delta_min: float = -_DEFAULT_DELTA
    delta_max: float = _DEFAULT_DELTA
    v_r_min: float = 0.0
    v_r_max: float = 5.0
    v_h_min: float = 0.0
    v_h_max: float = 10.0
    human_limits: ActionBounds = field(default=DEFAULT_HUMAN_LIMITS)

    def __post_init__(self):
        if self.l_f <= 0 or self.l_r <= 0:
            raise ValueError("axle distances must be positive")
        for lo, hi in ((self.a_r_min, self.a_r_max), (self.delta_min, self.delta_max),
                       (self.v_r_min, self.v_r_max), (self.v_h_min, self.v_h_max)):
            if lo > hi:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        if max(abs(self.delta_min), abs(self.delta_max)) >= math.pi / 2:
            raise ValueError("steering bound must stay below pi/2")

    def steering_candidates(self) -> np.ndarray:
        return steering_candidates(self.delta_min, self.delta_max)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["human_limits"] = self.human_limits.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VehicleParams":
        d = dict(d)
        if "human_limits" in d:
            d["human_limits"] = ActionBounds.from_dict(d["human_limits"])
        return cls(**d)

    def with_human_limits(self, limits: ActionBounds) -> "VehicleParams":
        return replace(self, human_limits=limits)


def steering_candidates(lo: float, hi: float, n: int = N_STEER_CANDIDATES) -> np.ndarray:
    """``n`` uniform steering values over ``[lo, hi]``, plus 0 when inside.

    Returned sorted by ``(|delta|, delta)`` so strict-improvement scans
    break ties toward the smallest steering magnitude.
    """
    cand = np.linspace(lo, hi, n)
    if lo < 0.0 < hi and not np.any(cand == 0.0):
        cand = np.append(cand, 0.0)
    if lo == hi:
        cand = np.array([lo])
    order = np.lexsort((cand, np.abs(cand)))
    return cand[order]


# ---------------------------------------------------------------------------
# states and actions

@dataclass(frozen=True)
class HumanState:
    x: float
    y: float
    v: float
    psi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.psi])


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    v: float
    psi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.psi])


@dataclass(frozen=True)
class RelativeState:
    x_rel: float
    y_rel: float
    psi_rel: float
    v_h: float
    v_r: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x_rel, self.y_rel, self.psi_rel, self.v_h, self.v_r])


@dataclass(frozen=True)
class HumanAction:
    a: float
    omega: float


@dataclass(frozen=True)
class RobotAction:
    a: float
    delta: float


def slip_angle(delta, l_f: float, l_r: float):
    return np.arctan(l_r / (l_f + l_r) * np.tan(delta))


def _check_steering(delta):
    if np.any(np.abs(delta) >= math.pi / 2):
        raise ValueError("steering angle magnitude must be below pi/2")


def human_derivative(s: HumanState, u: HumanAction) -> np.ndarray:
    return np.array([s.v * math.cos(s.psi), s.v * math.sin(s.psi), u.a, u.omega])


def robot_derivative(s: RobotState, u: RobotAction, p: VehicleParams) -> np.ndarray:
    _check_steering(u.delta)
    beta = math.atan(p.l_r / (p.l_f + p.l_r) * math.tan(u.delta))
    return np.array([s.v * math.cos(s.psi + beta), s.v * math.sin(s.psi + beta), u.a,
                     s.v / p.l_r * math.sin(beta)])


def relative_state(r: RobotState, h: HumanState) -> RelativeState:
    dx, dy = h.x - r.x, h.y - r.y
    c, s = math.cos(r.psi), math.sin(r.psi)
    return RelativeState(c * dx + s * dy, -s * dx + c * dy, wrap_angle(h.psi - r.psi), h.v, r.v)


def relative_dynamics(z, u, d, l_f: float, l_r: float) -> np.ndarray:
    """Broadcasting form of the 5D relative dynamics.

    ``z[..., 5]``, ``u[..., 2] = (a_r, delta_f)``, ``d[..., 2] = (a_h, omega_h)``.
    """
    z, u, d = np.asarray(z, float), np.asarray(u, float), np.asarray(d, float)
    _check_steering(u[..., 1])
    x, y, psi, vh, vr = (z[..., k] for k in range(5))
    beta = slip_angle(u[..., 1], l_f, l_r)
    yaw_r = vr / l_r * np.sin(beta)
    return np.stack(np.broadcast_arrays(
        yaw_r * y + vh * np.cos(psi) - vr * np.cos(beta),
        -yaw_r * x + vh * np.sin(psi) - vr * np.sin(beta),
        d[..., 1] - yaw_r,
        d[..., 0],
        u[..., 0],
    ), axis=-1)


def relative_derivative(z: RelativeState, u: RobotAction, d: HumanAction, p: VehicleParams) -> np.ndarray:
    return relative_dynamics(z.as_array(), [u.a, u.delta], [d.a, d.omega], p.l_f, p.l_r)


# ---------------------------------------------------------------------------
# per-node Hamiltonian optimizers (shared by the solver and table extraction)

@numba.njit(cache=True, inline="always")
def _bang_max(coef, lo, hi):
    if coef > 0.0:
        return hi
    if coef < 0.0:
        return lo
    return min(max(0.0, lo), hi)


@numba.njit(cache=True, inline="always")
def _bang_min(coef, lo, hi):
    if coef > 0.0:
        return lo
    if coef < 0.0:
        return hi
    return min(max(0.0, lo), hi)


@numba.njit(cache=True, inline="always")
def _best_steer(vr, b, c, prm, off, K, out, slot):
    # max over candidates of vr * (sin(beta_k) * b + cos(beta_k) * c); the
    # argmax pass only runs when the caller wants inputs (out non-empty)
    best = -np.inf
    for k in range(K):
        val = vr * (prm[off + K + k] * b + prm[off + 2 * K + k] * c)
        best = max(best, val)
    if out.size:
        for k in range(K):
            if vr * (prm[off + K + k] * b + prm[off + 2 * K + k] * c) == best:
                out[slot] = prm[off + k]
                break
    return best


@numba.njit(cache=True)
def _ham_rel5(x, cx, sx, p, prm, out):
    # prm: l_r, ar_lo, ar_hi, ah_lo, ah_hi, wh_lo, wh_hi, K, delta[K], sinb[K], cosb[K]
    l_r = prm[0]
    K = int(prm[7])
    vh = x[3]
    vr = x[4]
    drift = vh * (p[0] * cx[2] + p[1] * sx[2])
    b = (p[0] * x[1] - p[1] * x[0] - p[2]) / l_r - p[1]
    best = _best_steer(vr, b, -p[0], prm, 8, K, out, 1)
    a_r = _bang_max(p[4], prm[1], prm[2])
    a_h = _bang_min(p[3], prm[3], prm[4])
    w_h = _bang_min(p[2], prm[5], prm[6])
    if out.size:
        out[0] = a_r
        out[2] = a_h
        out[3] = w_h
    return drift + best + p[4] * a_r + p[3] * a_h + p[2] * w_h


@numba.njit(cache=True)
def _ham_rel3(x, cx, sx, p, prm, out):
    # prm: l_r, v_h, v_r, wh_lo, wh_hi, K, delta[K], sinb[K], cosb[K]
    l_r = prm[0]
    vh = prm[1]
    vr = prm[2]
    K = int(prm[5])
    drift = vh * (p[0] * cx[2] + p[1] * sx[2])
    b = (p[0] * x[1] - p[1] * x[0] - p[2]) / l_r - p[1]
    best = _best_steer(vr, b, -p[0], prm, 6, K, out, 0)
    w_h = _bang_min(p[2], prm[3], prm[4])
    if out.size:
        out[1] = w_h
    return drift + best + p[2] * w_h


@numba.njit(cache=True)
def _ham_robot4(x, cx, sx, p, prm, out):
    # state (x, y, v, psi); prm: l_r, ar_lo, ar_hi, K, delta[K], sinb[K], cosb[K]
    l_r = prm[0]
    K = int(prm[3])
    v = x[2]
    along = p[0] * cx[3] + p[1] * sx[3]
    across = p[1] * cx[3] - p[0] * sx[3] + p[3] / l_r
    # sin(beta) pairs with `across`, cos(beta) with `along`
    best = _best_steer(v, across, along, prm, 4, K, out, 1)
    a_r = _bang_max(p[2], prm[1], prm[2])
    if out.size:
        out[0] = a_r
    return best + p[2] * a_r


@numba.njit(cache=True)
def _ham_toy1(x, cx, sx, p, prm, out):
    # x' = u + d; prm: u_lo, u_hi, d_lo, d_hi
    u = _bang_max(p[0], prm[0], prm[1])
    d = _bang_min(p[0], prm[2], prm[3])
    if out.size:
        out[0] = u
        out[1] = d
    return p[0] * (u + d)


@numba.njit(cache=True)
def _optimize_nodes(ham, X, P, prm, n_out):
    n = X.shape[0]
    H = np.empty(n)
    inputs = np.empty((n, n_out))
    out = np.empty(n_out)
    for i in range(n):
        H[i] = ham(X[i], np.cos(X[i]), np.sin(X[i]), P[i], prm, out)
        for k in range(n_out):
            inputs[i, k] = out[k]
    return H, inputs


def _steer_table(delta_lo, delta_hi, l_f, l_r):
    cand = steering_candidates(delta_lo, delta_hi)
    beta = slip_angle(cand, l_f, l_r)
    return cand, np.sin(beta), np.cos(beta)


def _mesh_columns(grid: Grid) -> list[np.ndarray]:
    return [m.ravel() for m in grid.mesh()]


def _planar_bounds(x, y, psi, vh, vr, l_r, sb, cb, hb: ActionBounds) -> np.ndarray:
    """Node-wise ``max |f|`` of the relative (x, y, psi) rates over steering candidates and omega_h."""
    x, y, psi = np.broadcast_arrays(x, y, psi)
    vh = np.broadcast_to(vh, x.shape)
    vr = np.broadcast_to(vr, x.shape)
    out = np.zeros((x.size, 3))
    hx = vh * np.cos(psi)
    hy = vh * np.sin(psi)
    for s_k, c_k in zip(sb, cb):
        yaw = vr / l_r * s_k
        out[:, 0] = np.maximum(out[:, 0], np.abs(yaw * y + hx - vr * c_k))
        out[:, 1] = np.maximum(out[:, 1], np.abs(-yaw * x + hy - vr * s_k))
        for w in (hb.omega_min, hb.omega_max):
            out[:, 2] = np.maximum(out[:, 2], np.abs(w - yaw))
    return out


class Dynamics:
    """A game system the grid solver can integrate.

    Subclasses provide the node-wise optimizer ``ham`` (numba), its parameter
    vector, and per-dimension dissipation bounds.
    """

    ndim: int
    input_names: tuple[str, ...]
    control_names: tuple[str, ...] = ()

    def params(self) -> np.ndarray:
        raise NotImplementedError

    def alphas(self, grid: Grid) -> np.ndarray:
        raise NotImplementedError

    def local_alphas(self, grid: Grid) -> np.ndarray:
        """Node-wise bounds ``max |f_i|`` over the input sets, shape ``(size, ndim)``.

        The default is the global bound at every node.
        """
        return np.broadcast_to(self.alphas(grid), (grid.size, grid.ndim)).copy()

    def key(self) -> tuple:
        return (type(self).__name__, tuple(np.round(self.params(), 15)))

    def optimize(self, states, grads) -> tuple[np.ndarray, np.ndarray]:
        """Optimal inputs and min-max Hamiltonian at many ``(state, grad)`` pairs.

        Returns ``(H[n], inputs[n, n_inputs])`` with inputs ordered as
        ``input_names``.
        """
        X = np.ascontiguousarray(np.atleast_2d(states), dtype=np.float64)
        P = np.ascontiguousarray(np.atleast_2d(grads), dtype=np.float64)
        if not np.all(np.isfinite(P)):
            raise ValueError("non-finite gradient")
        X, P = np.broadcast_arrays(X, P)
        return _optimize_nodes(self.ham, np.ascontiguousarray(X), np.ascontiguousarray(P),
                               self.params(), len(self.input_names))


class RelativeCarDynamics(Dynamics):
    """Full 5D car-vs-car game."""

    ndim = 5
    input_names = ("a_r", "delta_f", "a_h", "omega_h")
    control_names = ("a_r", "delta_f")
    ham = staticmethod(_ham_rel5)

    def __init__(self, vehicle: VehicleParams, human_bounds: ActionBounds):
        self.vehicle = vehicle
        self.human_bounds = human_bounds

    def params(self) -> np.ndarray:
        p, hb = self.vehicle, self.human_bounds
        cand, sb, cb = _steer_table(p.delta_min, p.delta_max, p.l_f, p.l_r)
        head = [p.l_r, p.a_r_min, p.a_r_max, hb.a_min, hb.a_max, hb.omega_min, hb.omega_max, len(cand)]
        return np.concatenate([head, cand, sb, cb])

    def alphas(self, grid: Grid) -> np.ndarray:
        p, hb = self.vehicle, self.human_bounds
        _, sb, cb = _steer_table(p.delta_min, p.delta_max, p.l_f, p.l_r)
        ext = [np.max(np.abs(c)) for c in grid.coords]
        vh, vr = ext[3], ext[4]
        yaw = vr / p.l_r * np.max(np.abs(sb))
        return np.array([
            yaw * ext[1] + vh + vr * np.max(np.abs(cb)),
            yaw * ext[0] + vh + vr * np.max(np.abs(sb)),
            max(abs(hb.omega_min), abs(hb.omega_max)) + yaw,
            max(abs(hb.a_min), abs(hb.a_max)),
            max(abs(p.a_r_min), abs(p.a_r_max)),
        ])

    def local_alphas(self, grid: Grid) -> np.ndarray:
        p, hb = self.vehicle, self.human_bounds
        _, sb, cb = _steer_table(p.delta_min, p.delta_max, p.l_f, p.l_r)
        X = _mesh_columns(grid)
        out = np.zeros((grid.size, 5))
        out[:, :3] = _planar_bounds(X[0], X[1], X[2], X[3], X[4], p.l_r, sb, cb, hb)
        out[:, 3] = max(abs(hb.a_min), abs(hb.a_max))
        out[:, 4] = max(abs(p.a_r_min), abs(p.a_r_max))
        return out


class ReducedRelativeDynamics(Dynamics):
    """3D slice of the car game with both speeds frozen (``v_h``, ``v_r`` fixed)."""

    ndim = 3
    input_names = ("delta_f", "omega_h")
    control_names = ("delta_f",)
    ham = staticmethod(_ham_rel3)

    def __init__(self, vehicle: VehicleParams, human_bounds: ActionBounds, v_h: float, v_r: float):
        self.vehicle = vehicle
        self.human_bounds = human_bounds
        self.v_h = v_h
        self.v_r = v_r

    def params(self) -> np.ndarray:
        p, hb = self.vehicle, self.human_bounds
        cand, sb, cb = _steer_table(p.delta_min, p.delta_max, p.l_f, p.l_r)
        head = [p.l_r, self.v_h, self.v_r, hb.omega_min, hb.omega_max, len(cand)]
        return np.concatenate([head, cand, sb, cb])

    def alphas(self, grid: Grid) -> np.ndarray:
        p, hb = self.vehicle, self.human_bounds
        _, sb, cb = _steer_table(p.delta_min, p.delta_max, p.l_f, p.l_r)
        ext = [np.max(np.abs(c)) for c in grid.coords]
        vh, vr = abs(self.v_h), abs(self.v_r)
        yaw = vr / p.l_r * np.max(np.abs(sb))
        return np.array([
            yaw * ext[1] + vh + vr * np.max(np.abs(cb)),
            yaw * ext[0] + vh + vr * np.max(np.abs(sb)),
            max(abs(hb.omega_min), abs(hb.omega_max)) + yaw,
        ])

    def local_alphas(self, grid: Grid) -> np.ndarray:
        p = self.vehicle
        _, sb, cb = _steer_table(p.delta_min, p.delta_max, p.l_f, p.l_r)
        X = _mesh_columns(grid)
        return _planar_bounds(X[0], X[1], X[2], self.v_h, self.v_r, p.l_r, sb, cb, self.human_bounds)


class RobotCurbDynamics(Dynamics):
    """4D bicycle model ``(x, y, v, psi)`` with control only (curb avoidance)."""

    ndim = 4
    input_names = ("a_r", "delta_f")
    control_names = ("a_r", "delta_f")
    ham = staticmethod(_ham_robot4)

    def __init__(self, vehicle: VehicleParams):
        self.vehicle = vehicle

    def params(self) -> np.ndarray:
        p = self.vehicle
        cand, sb, cb = _steer_table(p.delta_min, p.delta_max, p.l_f, p.l_r)
        return np.concatenate([[p.l_r, p.a_r_min, p.a_r_max, len(cand)], cand, sb, cb])

    def alphas(self, grid: Grid) -> np.ndarray:
        p = self.vehicle
        _, sb, _ = _steer_table(p.delta_min, p.delta_max, p.l_f, p.l_r)
        v = np.max(np.abs(grid.coords[2]))
        return np.array([v, v, max(abs(p.a_r_min), abs(p.a_r_max)), v / p.l_r * np.max(np.abs(sb))])

    def local_alphas(self, grid: Grid) -> np.ndarray:
        p = self.vehicle
        _, sb, cb = _steer_table(p.delta_min, p.delta_max, p.l_f, p.l_r)
        beta = np.arctan2(sb, cb)
        _, _, v, psi = _mesh_columns(grid)
        out = np.zeros((grid.size, 4))
        for b in beta:
            out[:, 0] = np.maximum(out[:, 0], np.abs(v * np.cos(psi + b)))
            out[:, 1] = np.maximum(out[:, 1], np.abs(v * np.sin(psi + b)))
        out[:, 2] = max(abs(p.a_r_min), abs(p.a_r_max))
        out[:, 3] = np.abs(v) / p.l_r * np.max(np.abs(sb))
        return out


class ToyDynamics1D(Dynamics):
    """``x' = u + d`` with ``u`` maximizing and ``d`` minimizing."""

    ndim = 1
    input_names = ("u", "d")
    control_names = ("u",)
    ham = staticmethod(_ham_toy1)

    def __init__(self, u_bounds=(-0.5, 0.5), d_bounds=(-1.0, 1.0)):
        self.u_bounds = tuple(map(float, u_bounds))
        self.d_bounds = tuple(map(float, d_bounds))

    def params(self) -> np.ndarray:
        return np.array([*self.u_bounds, *self.d_bounds])

    def alphas(self, grid: Grid) -> np.ndarray:
        return np.array([max(map(abs, self.u_bounds)) + max(map(abs, self.d_bounds))])


def optimal_inputs(z: RelativeState, grad, human_bounds: ActionBounds,
                   p: VehicleParams) -> tuple[RobotAction, HumanAction, float]:
    """Robot input maximizing and human input minimizing ``grad . f`` at ``z``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (5,) or not np.all(np.isfinite(grad)):
        raise ValueError("gradient must be a finite 5-vector")
    H, u = RelativeCarDynamics(p, human_bounds).optimize(z.as_array(), grad)
    return RobotAction(u[0, 0], u[0, 1]), HumanAction(u[0, 2], u[0, 3]), float(H[0])
