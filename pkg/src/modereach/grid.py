"""Dense rectilinear grids, value fields, target functions and interpolation.

Periodic dimensions store exactly one period with the duplicate endpoint
omitted, so node ``i`` sits at ``min + i * period / count``.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from scipy.spatial import cKDTree

MAX_DIMS = 5
RGVF_MAGIC = b"RGVF"
RGVF_VERSION = 1


class GridError(ValueError):
    pass


class OutOfGridError(GridError):
    pass


@dataclass(frozen=True)
class Dim:
    min: float
    max: float
    count: int
    periodic: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.min) and math.isfinite(self.max)):
            raise GridError("grid bounds must be finite")
        if self.min >= self.max:
            raise GridError(f"min {self.min} must be < max {self.max}")
        if int(self.count) != self.count or self.count < 3:
            raise GridError(f"count must be an integer >= 3, got {self.count}")

    @property
    def spacing(self) -> float:
        if self.periodic:
            return (self.max - self.min) / self.count
        return (self.max - self.min) / (self.count - 1)

    @property
    def period(self) -> float:
        return self.max - self.min

    def nodes(self) -> np.ndarray:
        i = np.arange(self.count, dtype=np.float64)
        if self.periodic:
            return self.min + i * self.spacing
        out = self.min + i * self.spacing
        out[-1] = self.max
        return out


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[Dim, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if not 1 <= len(self.dims) <= MAX_DIMS:
            raise GridError(f"number of dimensions must be in 1..{MAX_DIMS}, got {len(self.dims)}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(d.count for d in self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def to_dict(self) -> dict:
        return {"dims": [{"min": d.min, "max": d.max, "count": d.count, "periodic": d.periodic}
                         for d in self.dims]}

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        dims = data["dims"] if isinstance(data, dict) else data
        return cls(tuple(Dim(float(d["min"]), float(d["max"]), int(d["count"]),
                             bool(d.get("periodic", False))) for d in dims))


class Grid:
    """Materialized node coordinates for a :class:`GridSpec`."""

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.coords = tuple(d.nodes() for d in spec.dims)
        self.spacing = np.array([d.spacing for d in spec.dims])
        self.shape = spec.shape
        self.periodic = np.array([d.periodic for d in spec.dims])
        self.lo = np.array([d.min for d in spec.dims])
        self.hi = np.array([d.max for d in spec.dims])

    @property
    def ndim(self) -> int:
        return self.spec.ndim

    @property
    def size(self) -> int:
        return self.spec.size

    def node(self, flat_index: int) -> np.ndarray:
        idx = np.unravel_index(flat_index, self.shape)
        return np.array([c[i] for c, i in zip(self.coords, idx)])

    def index_of(self, point: Sequence[float]) -> int:
        """Flat index of the node at ``point``; raises if ``point`` is not a node."""
        idx = []
        for d, c, x in zip(self.spec.dims, self.coords, point):
            i = int(round((x - d.min) / d.spacing))
            if d.periodic:
                i %= d.count
            if not 0 <= i < d.count or not math.isclose(c[i], x, abs_tol=1e-9 * max(1.0, abs(x))):
                raise GridError(f"{x} is not a node coordinate")
            idx.append(i)
        return int(np.ravel_multi_index(idx, self.shape))

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*self.coords, indexing="ij"))

    def coord_table(self) -> np.ndarray:
        """Coordinates padded into a ``(ndim, max_count)`` array for kernels."""
        table = np.zeros((self.ndim, max(self.shape)))
        for k, c in enumerate(self.coords):
            table[k, : len(c)] = c
        return table

    def max_cell_diagonal(self) -> float:
        return float(np.sqrt(np.sum(self.spacing ** 2)))


def build_grid(spec: GridSpec) -> Grid:
    return Grid(spec)


@dataclass(frozen=True, eq=False)
class ValueField:
    spec: GridSpec
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if vals.size != self.spec.size:
            raise GridError(f"values length {vals.size} != grid size {self.spec.size}")
        if not np.all(np.isfinite(vals)):
            raise GridError("value field contains non-finite entries")
        if vals is self.values or vals.base is not None:
            vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.spec.shape)

    def grid(self) -> Grid:
        return Grid(self.spec)

    def relabel(self, label: str) -> "ValueField":
        return ValueField(self.spec, self.values, label)


@dataclass(frozen=True)
class TargetSpec:
    """Car collision rectangle (half-extents) or a curb occupancy mask."""

    c1: float | None = None
    c2: float | None = None
    occupancy: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.occupancy is None:
            if self.c1 is None or self.c2 is None or self.c1 <= 0 or self.c2 <= 0:
                raise GridError("rectangle target needs C1 > 0 and C2 > 0")


def signed_distance_rect(grid: Grid, target: TargetSpec, dims: tuple[int, int] = (0, 1),
                         label: str = "target") -> ValueField:
    """``max(|x| - C1, |y| - C2)`` over the positional dims, broadcast over the rest."""
    if grid.ndim < 2 or max(dims) >= grid.ndim:
        raise GridError("grid lacks positional dimensions")
    if target.c1 is None:
        raise GridError("signed_distance_rect needs a rectangle target")
    shape = [1] * grid.ndim
    shape[dims[0]] = -1
    x = grid.coords[dims[0]].reshape(shape)
    shape[dims[0]] = 1
    shape[dims[1]] = -1
    y = grid.coords[dims[1]].reshape(shape)
    values = np.broadcast_to(np.maximum(np.abs(x) - target.c1, np.abs(y) - target.c2), grid.shape)
    return ValueField(grid.spec, values.ravel(), label)


def signed_distance_occupancy(grid: Grid, occupancy: np.ndarray, dims: tuple[int, int] = (0, 1),
                              label: str = "curbs") -> ValueField:
    """Chebyshev distance to the nearest occupied cell, negated inside the occupancy.

    Inside values are minus the distance to the nearest free cell. An empty mask
    yields a large positive constant, a full mask a large negative one.
    """
    occ = np.asarray(occupancy, dtype=bool)
    sub_shape = (grid.shape[dims[0]], grid.shape[dims[1]])
    if occ.shape != sub_shape:
        raise GridError(f"occupancy shape {occ.shape} != positional subgrid {sub_shape}")
    xs, ys = grid.coords[dims[0]], grid.coords[dims[1]]
    big = float(np.hypot(xs[-1] - xs[0], ys[-1] - ys[0]))
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    flat = occ.ravel()
    dist = np.empty(flat.size)
    if flat.all():
        dist[:] = -big
    elif not flat.any():
        dist[:] = big
    else:
        d_occ, _ = cKDTree(pts[flat]).query(pts[~flat], p=np.inf)
        d_free, _ = cKDTree(pts[~flat]).query(pts[flat], p=np.inf)
        dist[~flat] = d_occ
        dist[flat] = -d_free
    plane = dist.reshape(sub_shape)
    shape = [1] * grid.ndim
    shape[dims[0]] = sub_shape[0]
    shape[dims[1]] = sub_shape[1]
    if dims[0] > dims[1]:
        plane = plane.T
    values = np.broadcast_to(plane.reshape(shape), grid.shape)
    return ValueField(grid.spec, values.ravel(), label)


# ---------------------------------------------------------------------------
# multilinear interpolation

@numba.njit(cache=True)
def _interp(values, shape, lo, spacing, periodic, state, clamp):
    nd = shape.size
    base = np.empty(nd, dtype=np.int64)
    upper = np.empty(nd, dtype=np.int64)
    frac = np.empty(nd)
    clamped = False
    for k in range(nd):
        c = shape[k]
        u = (state[k] - lo[k]) / spacing[k]
        r = math.floor(u + 0.5)
        if abs(u - r) < 1e-9:
            u = r
        if periodic[k]:
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
    if clamped and not clamp:
        return np.nan, True
    strides = np.empty(nd, dtype=np.int64)
    s = 1
    for k in range(nd - 1, -1, -1):
        strides[k] = s
        s *= shape[k]
    total = 0.0
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
            total += w * values[off]
    return total, clamped


class Interpolator:
    """Fast repeated lookups into one field; holds the kernel arguments."""

    __slots__ = ("field", "_shape", "_lo", "_dx", "_per")

    def __init__(self, field: ValueField):
        self.field = field
        g = field.grid()
        self._shape = np.array(g.shape, dtype=np.int64)
        self._lo = g.lo.copy()
        self._dx = g.spacing.copy()
        self._per = g.periodic.copy()

    def __call__(self, state, clamp: bool = True) -> tuple[float, bool]:
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (self._shape.size,):
            raise GridError(f"state has {state.size} components, grid has {self._shape.size}")
        val, clamped = _interp(self.field.values, self._shape, self._lo, self._dx, self._per,
                               state, clamp)
        if clamped and not clamp:
            raise OutOfGridError(f"state {state} outside grid bounds")
        return float(val), bool(clamped)


def interpolate(field: ValueField, state, clamp: bool = True) -> float:
    """Multilinear interpolation, wrapping periodic dims.

    Out-of-bounds queries on non-periodic dims are clamped to the boundary,
    or raise :class:`OutOfGridError` when ``clamp`` is False.
    """
    return Interpolator(field)(state, clamp)[0]


# ---------------------------------------------------------------------------
# RGVF binary format

def field_to_bytes(field: ValueField) -> bytes:
    label = field.label.encode("utf-8")
    parts = [RGVF_MAGIC, struct.pack("<HH", RGVF_VERSION, field.spec.ndim)]
    for d in field.spec.dims:
        parts.append(struct.pack("<ddIB", d.min, d.max, d.count, int(d.periodic)))
    parts.append(struct.pack("<H", len(label)))
    parts.append(label)
    parts.append(field.values.astype("<f8").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def field_from_bytes(blob: bytes) -> ValueField:
    if len(blob) < 12 or blob[:4] != RGVF_MAGIC:
        raise GridError("not an RGVF file")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise GridError("RGVF checksum mismatch")
    version, ndim = struct.unpack_from("<HH", payload, 4)
    if version != RGVF_VERSION:
        raise GridError(f"unsupported RGVF version {version}")
    off = 8
    dims = []
    for _ in range(ndim):
        lo, hi, count, per = struct.unpack_from("<ddIB", payload, off)
        off += struct.calcsize("<ddIB")
        dims.append(Dim(lo, hi, count, bool(per)))
    (nlabel,) = struct.unpack_from("<H", payload, off)
    off += 2
    label = payload[off: off + nlabel].decode("utf-8")
    off += nlabel
    spec = GridSpec(tuple(dims))
    values = np.frombuffer(payload, dtype="<f8", count=spec.size, offset=off)
    if off + 8 * spec.size != len(payload):
        raise GridError("RGVF payload length mismatch")
    return ValueField(spec, values.astype(np.float64), label)


def save_field(field: ValueField, path: str | Path) -> int:
    """Write ``field`` as RGVF; returns the CRC32 trailer."""
    blob = field_to_bytes(field)
    Path(path).write_bytes(blob)
    return struct.unpack("<I", blob[-4:])[0]


def load_field(path: str | Path) -> ValueField:
    return field_from_bytes(Path(path).read_bytes())


def field_checksum(field: ValueField) -> int:
    return struct.unpack("<I", field_to_bytes(field)[-4:])[0]
