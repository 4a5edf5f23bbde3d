"""Synthetic stand-ins for recorded traffic: action clouds and Dubins trajectories."""

from __future__ import annotations

import math

import numpy as np

from .dynamics import ActionBounds, wrap_angle
from .modes import DT, NOMINALS, ActionSample, Trajectory

# half-widths of the uniform cloud drawn around each mode default
DEFAULT_SPREAD = (0.5, 0.06)


def synthetic_action_dataset(n_per_mode: int = 100, seed: int = 0,
                             spread: tuple[float, float] = DEFAULT_SPREAD,
                             modes=range(6)) -> list[ActionSample]:
    """Uniform action clouds centered on the mode defaults."""
    rng = np.random.default_rng(seed)
    out = []
    for m in modes:
        _, a0, w0 = NOMINALS[m]
        a = a0 + rng.uniform(-spread[0], spread[0], n_per_mode)
        w = w0 + rng.uniform(-spread[1], spread[1], n_per_mode)
        out.extend(ActionSample(float(ai), float(wi), f"synthetic_mode{m}", k)
                   for k, (ai, wi) in enumerate(zip(a, w)))
    return out


def integrate_dubins(x0: float, y0: float, v0: float, psi0: float, actions, dt: float = DT,
                     substeps: int = 10, v_limits: tuple[float, float] | None = None,
                     name: str = "") -> Trajectory:
    """Integrate the Dubins car under piecewise-constant ``actions`` (one per sample step).

    Each step is integrated in closed form per substep (exact for constant
    inputs without speed limits). Returns ``len(actions) + 1`` samples.
    """
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
    n = len(actions)
    xs, ys, vs, ps = (np.empty(n + 1) for _ in range(4))
    x, y, v, psi = x0, y0, v0, psi0
    xs[0], ys[0], vs[0], ps[0] = x, y, v, psi
    h = dt / substeps
    for k, (a, w) in enumerate(actions):
        for _ in range(substeps):
            x, y, v, psi = _dubins_step(x, y, v, psi, a, w, h, v_limits)
        xs[k + 1], ys[k + 1], vs[k + 1], ps[k + 1] = x, y, v, psi
    t = np.arange(n + 1) * dt
    return Trajectory(t, xs, ys, vs, dt, wrap_angle(ps), name)


def _dubins_step(x, y, v, psi, a, w, h, v_limits):
    # RK4 on the four-state model; speed clipped afterwards when limited
    def f(s):
        return np.array([s[2] * math.cos(s[3]), s[2] * math.sin(s[3]), a, w])

    s = np.array([x, y, v, psi])
    k1 = f(s)
    k2 = f(s + 0.5 * h * k1)
    k3 = f(s + 0.5 * h * k2)
    k4 = f(s + h * k3)
    s = s + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if v_limits is not None:
        s[2] = min(max(s[2], v_limits[0]), v_limits[1])
    return s[0], s[1], s[2], s[3]


def sample_mode_actions(bounds: ActionBounds, duration: float, seed: int, hold: float = 0.5,
                        dt: float = DT) -> np.ndarray:
    """Piecewise-constant actions drawn uniformly from ``bounds``, held ``hold`` s each."""
    rng = np.random.default_rng(seed)
    n = int(round(duration / dt))
    per = max(1, int(round(hold / dt)))
    n_draws = -(-n // per)
    a = rng.uniform(bounds.a_min, bounds.a_max, n_draws)
    w = rng.uniform(bounds.omega_min, bounds.omega_max, n_draws)
    return np.repeat(np.stack([a, w], axis=1), per, axis=0)[:n]


def circle_trajectory(radius: float, speed: float, n: int, dt: float = DT) -> Trajectory:
    t = np.arange(n) * dt
    ang = speed / radius * t
    return Trajectory(t, radius * np.cos(ang), radius * np.sin(ang), np.full(n, speed), dt)


def line_trajectory(speed: float, n: int, accel: float = 0.0, heading: float = 0.0,
                    dt: float = DT) -> Trajectory:
    t = np.arange(n) * dt
    s = speed * t + 0.5 * accel * t ** 2
    return Trajectory(t, s * math.cos(heading), s * math.sin(heading), speed + accel * t, dt)
