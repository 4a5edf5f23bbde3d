"""Driving-mode pipeline: action extraction, clustering, bounds and classification."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dynamics import ActionBounds, HumanAction, wrap_angle

log = logging.getLogger(__name__)

DT = 0.1
STANDSTILL_EPS = 1e-3
EDGE_EPS = 1e-9

# (a [m/s^2], omega [rad/s]) defaults of the six driving modes
NOMINALS: dict[int, tuple[str, float, float]] = {
    0: ("Deceleration", -1.5, 0.0),
    1: ("Stable", 0.0, 0.0),
    2: ("Acceleration", 1.5, 0.0),
    3: ("Left turn", 0.0, 0.2),
    4: ("Right turn", 0.0, -0.25),
    5: ("Roundabout", 0.0, 0.4),
}
OTHER = -1


class TrajectoryError(ValueError):
    pass


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    dt: float = DT
    psi: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.psi is not None:
            self.psi = np.asarray(self.psi, dtype=np.float64)
        n = self.t.size
        if n < 3:
            raise TrajectoryError(f"trajectory {self.name!r} needs at least 3 samples, got {n}")
        if not (self.x.size == self.y.size == self.v.size == n):
            raise TrajectoryError("column lengths differ")
        steps = np.diff(self.t)
        if np.any(steps <= 0):
            raise TrajectoryError(f"trajectory {self.name!r} timestamps not strictly increasing")
        if np.max(np.abs(steps - self.dt)) > 1e-6 * max(1.0, self.dt) + 1e-9 * abs(self.t[-1]):
            raise TrajectoryError(f"trajectory {self.name!r} is not sampled every {self.dt} s")

    def __len__(self) -> int:
        return self.t.size

    def window(self, start: int, stop: int) -> "Trajectory":
        psi = None if self.psi is None else self.psi[start:stop]
        return Trajectory(self.t[start:stop], self.x[start:stop], self.y[start:stop],
                          self.v[start:stop], self.dt, psi, self.name)


def read_trajectory_csv(path: str | Path, dt: float = DT) -> tuple[Trajectory, list[str]]:
    """Load a ``t,x,y,v`` CSV; malformed rows are skipped and reported."""
    path = Path(path)
    warnings: list[str] = []
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = [h.strip() for h in next(reader, [])]
        if header[:4] != ["t", "x", "y", "v"]:
            raise TrajectoryError(f"{path.name}: expected header t,x,y,v, got {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                vals = [float(c) for c in row[:4]]
                if len(vals) != 4 or not all(math.isfinite(v) for v in vals):
                    raise ValueError
            except ValueError:
                warnings.append(f"{path.name}:{lineno}: malformed row {row!r} skipped")
                continue
            rows.append(vals)
    if not rows:
        raise TrajectoryError(f"{path.name}: no valid rows")
    arr = np.array(rows)
    return Trajectory(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], dt, name=path.stem), warnings


def write_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "x", "y", "v"])
        for row in zip(traj.t, traj.x, traj.y, traj.v):
            w.writerow([repr(float(c)) for c in row])


@dataclass(frozen=True)
class ActionSample:
    a: float
    omega: float
    source: str = ""
    step: int = 0


def headings(traj: Trajectory) -> np.ndarray:
    """Headings from central differences (second-order one-sided at the ends).

    Where the stencil displacement is below 1 mm the heading of the previous
    sample is carried forward.
    """
    gx = np.gradient(traj.x, edge_order=2)
    gy = np.gradient(traj.y, edge_order=2)
    psi = np.arctan2(gy, gx)
    n = len(traj)
    disp = np.empty(n)
    disp[1:-1] = np.hypot(traj.x[2:] - traj.x[:-2], traj.y[2:] - traj.y[:-2])
    disp[0] = np.hypot(traj.x[1] - traj.x[0], traj.y[1] - traj.y[0])
    disp[-1] = np.hypot(traj.x[-1] - traj.x[-2], traj.y[-1] - traj.y[-2])
    moving = disp >= STANDSTILL_EPS
    if not moving.any():
        return np.zeros(n)
    first = int(np.argmax(moving))
    psi[:first] = psi[first]
    for i in range(first + 1, n):
        if not moving[i]:
            psi[i] = psi[i - 1]
    return psi


def action_arrays(traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """``(a, omega)`` at interior samples 1..n-2 by central differences."""
    psi = headings(traj)
    a = (traj.v[2:] - traj.v[:-2]) / (2 * traj.dt)
    omega = wrap_angle(psi[2:] - psi[:-2]) / (2 * traj.dt)
    return a, np.atleast_1d(omega)


def extract_actions(traj: Trajectory) -> list[ActionSample]:
    a, omega = action_arrays(traj)
    return [ActionSample(float(ai), float(wi), traj.name, k + 1) for k, (ai, wi) in enumerate(zip(a, omega))]


def as_action_array(dataset) -> np.ndarray:
    if isinstance(dataset, np.ndarray):
        return np.asarray(dataset, dtype=np.float64).reshape(-1, 2)
    rows = [[s.a, s.omega] if isinstance(s, ActionSample) else s for s in dataset]
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class NormalizationParams:
    a_scale: float
    omega_scale: float

    def apply(self, actions) -> np.ndarray:
        arr = np.asarray(actions, dtype=np.float64)
        return arr / np.array([self.a_scale, self.omega_scale])

    def to_dict(self) -> dict:
        return {"a_scale": self.a_scale, "omega_scale": self.omega_scale}


def normalize_actions(dataset) -> tuple[np.ndarray, NormalizationParams]:
    """Symmetric max-abs scaling per axis into ``[-1, 1]``."""
    arr = as_action_array(dataset)
    if arr.shape[0] == 0:
        raise ValueError("cannot normalize an empty dataset")
    scales = np.max(np.abs(arr), axis=0)
    scales[scales == 0] = 1.0
    params = NormalizationParams(float(scales[0]), float(scales[1]))
    return params.apply(arr), params


def mode_features(actions, defaults) -> np.ndarray:
    """Euclidean distances from each normalized action to each normalized mode default."""
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    defaults = np.atleast_2d(np.asarray(defaults, dtype=np.float64))
    return np.linalg.norm(actions[:, None, :] - defaults[None, :, :], axis=-1)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia_history: list[float]
    iterations: int
    repairs: list[str] = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _assign(features, centroids):
    d2 = np.sum((features[:, None, :] - centroids[None, :, :]) ** 2, axis=-1)
    labels = np.argmin(d2, axis=1)
    return labels, float(np.sum(d2[np.arange(len(features)), labels]))


def kmeans_cluster(features, k: int = 6, seed: int = 0, max_iters: int = 300,
                   init: np.ndarray | None = None) -> KMeansResult:
    """Lloyd's iterations from ``init`` (or ``k`` seeded random points).

    An empty cluster is reseeded at the data point farthest from its previous
    centroid.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.shape[0] < k:
        raise ValueError(f"need at least {k} points, got {X.shape[0]}")
    if init is None:
        rng = np.random.default_rng(seed)
        centroids = X[rng.choice(X.shape[0], size=k, replace=False)].copy()
    else:
        centroids = np.array(init, dtype=np.float64)
        if centroids.shape != (k, X.shape[1]):
            raise ValueError(f"init shape {centroids.shape} != {(k, X.shape[1])}")
    labels, inertia = _assign(X, centroids)
    history = [inertia]
    repairs: list[str] = []
    it = 0
    for it in range(1, max_iters + 1):
        new = centroids.copy()
        for j in range(k):
            members = X[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                far = int(np.argmax(np.sum((X - centroids[j]) ** 2, axis=1)))
                new[j] = X[far]
                msg = f"iteration {it}: cluster {j} empty, reseeded at point {far}"
                repairs.append(msg)
                log.info(msg)
        new_labels, new_inertia = _assign(X, new)
        centroids = new
        history.append(new_inertia)
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    # final centroids are the means of the final assignment
    for j in range(k):
        members = X[labels == j]
        if len(members):
            centroids[j] = members.mean(axis=0)
    return KMeansResult(labels, centroids, history, it, repairs)


def action_bounds(cluster) -> ActionBounds:
    arr = as_action_array(cluster)
    if arr.shape[0] == 0:
        raise ValueError("cannot bound an empty cluster")
    lo, hi = arr.min(axis=0), arr.max(axis=0)
    return ActionBounds(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))


@dataclass(frozen=True)
class DrivingMode:
    id: int
    label: str
    nominal: HumanAction
    bounds: ActionBounds | None

    def __post_init__(self):
        if self.id >= 0:
            if self.bounds is None:
                raise ValueError(f"mode {self.id} needs bounds")
            if not self.bounds.contains(self.nominal.a, self.nominal.omega):
                raise ValueError(f"mode {self.id} nominal outside its bounds")

    def to_dict(self) -> dict:
        return {"id": self.id, "label": self.label,
                "nominal": {"a": self.nominal.a, "omega": self.nominal.omega},
                "bounds": None if self.bounds is None else self.bounds.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DrivingMode":
        b = d.get("bounds")
        return cls(int(d["id"]), d.get("label", ""), HumanAction(float(d["nominal"]["a"]), float(d["nominal"]["omega"])),
                   None if b is None else ActionBounds.from_dict(b))


@dataclass
class ModeSet:
    modes: list[DrivingMode]
    normalization: NormalizationParams
    physical_limits: ActionBounds
    cluster_sizes: dict[int, int] = field(default_factory=dict)
    repairs: list[str] = field(default_factory=list)

    def by_id(self, mode_id: int) -> DrivingMode:
        for m in self.modes:
            if m.id == mode_id:
                return m
        raise KeyError(f"no mode {mode_id}")

    def bounds_for(self, mode_id: int) -> ActionBounds:
        """Disturbance set of a mode; Mode -1 uses the physical limits."""
        if mode_id == OTHER:
            return self.physical_limits
        return self.by_id(mode_id).bounds

    @property
    def ids(self) -> list[int]:
        return sorted(m.id for m in self.modes)

    @property
    def rect_modes(self) -> list[DrivingMode]:
        return [m for m in self.modes if m.id >= 0]

    def to_dict(self) -> dict:
        return {"modes": [m.to_dict() for m in sorted(self.modes, key=lambda m: m.id)],
                "normalization": self.normalization.to_dict(),
                "physical_limits": self.physical_limits.to_dict(),
                "cluster_sizes": {str(k): v for k, v in sorted(self.cluster_sizes.items())}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModeSet":
        modes = [DrivingMode.from_dict(m) for m in d["modes"]]
        norm = NormalizationParams(float(d["normalization"]["a_scale"]), float(d["normalization"]["omega_scale"]))
        if "physical_limits" in d:
            phys = ActionBounds.from_dict(d["physical_limits"])
        else:
            phys = _expand([m.bounds for m in modes if m.bounds is not None])
        sizes = {int(k): int(v) for k, v in d.get("cluster_sizes", {}).items()}
        return cls(modes, norm, phys, sizes)

    @classmethod
    def load(cls, path: str | Path) -> "ModeSet":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def _expand(boxes: Sequence[ActionBounds], frac: float = 0.1) -> ActionBounds:
    a_lo = min(b.a_min for b in boxes)
    a_hi = max(b.a_max for b in boxes)
    w_lo = min(b.omega_min for b in boxes)
    w_hi = max(b.omega_max for b in boxes)
    da, dw = frac * (a_hi - a_lo), frac * (w_hi - w_lo)
    return ActionBounds(a_lo - da, a_hi + da, w_lo - dw, w_hi + dw)


def physical_limits_from_data(dataset, frac: float = 0.1) -> ActionBounds:
    """Data bounding box widened on each side by ``frac`` of its width."""
    return _expand([action_bounds(dataset)], frac)


def nominal_array(ids: Iterable[int] = range(6)) -> np.ndarray:
    return np.array([[NOMINALS[i][1], NOMINALS[i][2]] for i in ids])


def cluster_modes(dataset, seed: int = 0, max_iters: int = 300) -> ModeSet:
    """Normalize, cluster around the six defaults and box each cluster."""
    raw = as_action_array(dataset)
    if raw.shape[0] < 6:
        raise ValueError(f"need at least 6 actions to cluster, got {raw.shape[0]}")
    norm, params = normalize_actions(raw)
    nominals = params.apply(nominal_array())
    feats = mode_features(norm, nominals)
    init = mode_features(nominals, nominals)
    res = kmeans_cluster(feats, k=6, seed=seed, max_iters=max_iters, init=init)
    # label clusters by nearest nominal feature vector (unique via assignment)
    cost = np.linalg.norm(res.centroids[:, None, :] - init[None, :, :], axis=-1)
    nearest = np.argmin(cost, axis=1)
    if len(set(nearest.tolist())) == 6:
        label_of = nearest
    else:
        rows, cols = linear_sum_assignment(cost)
        label_of = cols[np.argsort(rows)]
        res.repairs.append(f"cluster labels {nearest.tolist()} collided; resolved by assignment")
    modes = []
    sizes = {}
    for j in range(6):
        mode_id = int(label_of[j])
        name, a0, w0 = NOMINALS[mode_id]
        members = raw[res.assignments == j]
        sizes[mode_id] = int(len(members))
        pts = np.vstack([members, [[a0, w0]]])  # keep the nominal inside its box
        modes.append(DrivingMode(mode_id, name, HumanAction(a0, w0), action_bounds(pts)))
    phys = physical_limits_from_data(raw)
    modes.append(DrivingMode(OTHER, "Other", HumanAction(0.0, 0.0), None))
    modes.sort(key=lambda m: m.id)
    return ModeSet(modes, params, phys, sizes, list(res.repairs))


# ---------------------------------------------------------------------------
# classification

@dataclass(frozen=True)
class ModeProbabilities:
    probs: dict[int, float]

    @property
    def mode(self) -> int:
        return min(self.probs, key=lambda i: (-self.probs[i], i))

    @property
    def p_mode(self) -> float:
        return self.probs[self.mode]


def _edge_distance(b: ActionBounds, a: float, omega: float) -> float:
    return min(a - b.a_min, b.a_max - a, omega - b.omega_min, b.omega_max - omega)


def classify_action(action: HumanAction, modes: Sequence[DrivingMode] | ModeSet) -> ModeProbabilities:
    """Mode probabilities from rectangle membership and inverse edge distance."""
    if isinstance(modes, ModeSet):
        modes = modes.rect_modes
    inside = [m for m in modes if m.bounds is not None and m.bounds.contains(action.a, action.omega)]
    if not inside:
        return ModeProbabilities({OTHER: 1.0})
    if len(inside) == 1:
        return ModeProbabilities({inside[0].id: 1.0})
    w = np.array([1.0 / max(_edge_distance(m.bounds, action.a, action.omega), EDGE_EPS) for m in inside])
    p = w / w.sum()
    return ModeProbabilities({m.id: float(pi) for m, pi in zip(inside, p)})


def classify_trajectory(predicted: Trajectory, modes: Sequence[DrivingMode] | ModeSet) -> ModeProbabilities:
    """Uniform average of the per-step action classifications."""
    a, omega = action_arrays(predicted)
    total: dict[int, float] = {}
    for ai, wi in zip(a, omega):
        for k, p in classify_action(HumanAction(float(ai), float(wi)), modes).probs.items():
            total[k] = total.get(k, 0.0) + p
    s = sum(total.values())
    return ModeProbabilities({k: v / s for k, v in sorted(total.items())})


def read_actions_csv(path: str | Path) -> list[ActionSample]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(ActionSample(float(row["a"]), float(row["omega"]), row.get("source", ""),
                                    int(row.get("step", 0) or 0)))
    return out


def write_actions_csv(samples: Sequence[ActionSample], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source", "step", "a", "omega"])
        for s in samples:
            w.writerow([s.source, s.step, repr(s.a), repr(s.omega)])
