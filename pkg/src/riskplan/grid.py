"""BEV grid geometry and the grid-valued containers shared across the package.

Conventions
-----------
* World frame is (x, y) in meters.  Rows index ``y`` and columns index ``x``,
  so a grid is ``H x W`` with ``H * cell_size`` spanning ``y_range``.
* Cell ``(0, 0)`` has its lower corner at ``origin = (x_min, y_min)``.
* Flattening is row-major: flat index ``k`` is cell ``(k // W, k % W)``.

All containers freeze their arrays on construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import GeometryError, NumericError, OutOfGrid, ShapeError

DEFAULT_X_RANGE = (-70.4, 70.4)
DEFAULT_Y_RANGE = (-40.0, 40.0)
DEFAULT_CELL_SIZE = 0.8
DEFAULT_DT = 0.5
DEFAULT_HORIZON = 7
DEFAULT_HISTORY = 5

_SNAP = 1e-9


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = DEFAULT_X_RANGE
    y_range: tuple[float, float] = DEFAULT_Y_RANGE
    cell_size: float = DEFAULT_CELL_SIZE

    def __post_init__(self):
        if not self.cell_size > 0:
            raise GeometryError(f"cell_size must be positive, got {self.cell_size}")
        for name, (lo, hi) in (("x_range", self.x_range), ("y_range", self.y_range)):
            if not hi > lo:
                raise GeometryError(f"{name} must be increasing, got {(lo, hi)}")
            n = (hi - lo) / self.cell_size
            if abs(n - round(n)) > 1e-6:
                raise GeometryError(f"{name} span {hi - lo} is not a multiple of cell_size {self.cell_size}")
        object.__setattr__(self, "x_range", (float(self.x_range[0]), float(self.x_range[1])))
        object.__setattr__(self, "y_range", (float(self.y_range[0]), float(self.y_range[1])))

    @property
    def height(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))

    @property
    def width(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    @property
    def origin(self) -> tuple[float, float]:
        return self.x_range[0], self.y_range[0]

    def contains(self, x: float, y: float) -> bool:
        return (self.x_range[0] <= x <= self.x_range[1]) and (self.y_range[0] <= y <= self.y_range[1])

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range), "cell_size": self.cell_size}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), float(d["cell_size"]))


def world_to_cell(pos: Sequence[float], spec: GridSpec) -> tuple[int, int]:
    """Map a world position ``(x, y)`` to the ``(row, col)`` of the cell containing it.

    The upper range edges are inclusive and map to the last row/column.
    """
    x, y = float(pos[0]), float(pos[1])
    if not math.isfinite(x) or not spec.x_range[0] <= x <= spec.x_range[1]:
        raise OutOfGrid("x", x, *spec.x_range)
    if not math.isfinite(y) or not spec.y_range[0] <= y <= spec.y_range[1]:
        raise OutOfGrid("y", y, *spec.y_range)
    col = min(int(math.floor((x - spec.x_range[0]) / spec.cell_size + _SNAP)), spec.width - 1)
    row = min(int(math.floor((y - spec.y_range[0]) / spec.cell_size + _SNAP)), spec.height - 1)
    return row, col


def cell_to_world(cell: Sequence[int], spec: GridSpec) -> tuple[float, float]:
    """World coordinates of the center of cell ``(row, col)``."""
    row, col = int(cell[0]), int(cell[1])
    if not 0 <= row < spec.height:
        raise OutOfGrid("row", row, 0, spec.height - 1)
    if not 0 <= col < spec.width:
        raise OutOfGrid("col", col, 0, spec.width - 1)
    return (spec.x_range[0] + (col + 0.5) * spec.cell_size,
            spec.y_range[0] + (row + 0.5) * spec.cell_size)


def cell_centers(spec: GridSpec) -> np.ndarray:
    """``(H*W, 2)`` array of world cell centers in row-major order."""
    xs = spec.x_range[0] + (np.arange(spec.width) + 0.5) * spec.cell_size
    ys = spec.y_range[0] + (np.arange(spec.height) + 0.5) * spec.cell_size
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def flat_index(cell: Sequence[int], spec: GridSpec) -> int:
    return int(cell[0]) * spec.width + int(cell[1])


def rasterize_vehicles(vehicles: Iterable, spec: GridSpec, clip: bool = False) -> np.ndarray:
    """Binary ``H x W`` slice: a cell is set iff its center is strictly inside an oriented box.

    ``vehicles`` is any iterable of objects with ``x, y, heading, length, width``.
    Every vehicle center must be inside the grid unless ``clip`` is set, in which
    case vehicles partly or fully outside simply contribute fewer cells.
    """
    out = np.zeros(spec.shape, dtype=np.float64)
    xs = spec.x_range[0] + (np.arange(spec.width) + 0.5) * spec.cell_size
    ys = spec.y_range[0] + (np.arange(spec.height) + 0.5) * spec.cell_size
    for v in vehicles:
        if not clip:
            world_to_cell((v.x, v.y), spec)
        half_l, half_w = 0.5 * v.length, 0.5 * v.width
        reach = math.hypot(half_l, half_w)
        c0 = np.searchsorted(xs, v.x - reach)
        c1 = np.searchsorted(xs, v.x + reach, side="right")
        r0 = np.searchsorted(ys, v.y - reach)
        r1 = np.searchsorted(ys, v.y + reach, side="right")
        if c0 >= c1 or r0 >= r1:
            continue
        dx = xs[None, c0:c1] - v.x
        dy = ys[r0:r1, None] - v.y
        ch, sh = math.cos(v.heading), math.sin(v.heading)
        lon = dx * ch + dy * sh
        lat = -dx * sh + dy * ch
        inside = (np.abs(lon) < half_l) & (np.abs(lat) < half_w)
        out[r0:r1, c0:c1][inside] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    values: np.ndarray
    dt: float = DEFAULT_DT

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 3 or v.shape[0] < 1:
            raise ShapeError(f"occupancy must be T x H x W with T >= 1, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericError("occupancy contains non-finite values")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise NumericError("occupancy values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-step cell displacement ``(d_row, d_col)``; first axis has length ``T - 1``."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 4 or v.shape[-1] != 2:
            raise ShapeError(f"flow must be (T-1) x H x W x 2, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    def check_pair(self, occupancy: OccupancyGrid) -> None:
        expected = (occupancy.horizon - 1,) + occupancy.values.shape[1:] + (2,)
        if self.values.shape != expected:
            raise ShapeError(f"flow shape {self.values.shape} does not pair with occupancy (expected {expected})")


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 3:
            raise ShapeError(f"features must be H x W x C, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericError("feature grid contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def flatten_features(grid: FeatureGrid) -> np.ndarray:
    """Row-major ``(H*W) x C`` view of a feature grid."""
    h, w, c = grid.values.shape
    return grid.values.reshape(h * w, c)


@dataclass(frozen=True, eq=False)
class RiskMap:
    """One attention distribution over all grid cells per vehicle."""

    weights: np.ndarray
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != 2:
            raise ShapeError(f"risk map must be N x (H*W), got shape {w.shape}")
        if self.grid_shape is not None and self.grid_shape[0] * self.grid_shape[1] != w.shape[1]:
            raise ShapeError(f"grid shape {self.grid_shape} does not match {w.shape[1]} columns")
        if w.size:
            if w.min() < 0.0:
                raise NumericError("risk map has negative weights")
            if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-6:
                raise NumericError("risk map rows must sum to 1")
        object.__setattr__(self, "weights", w)

    def as_grid(self, i: int) -> np.ndarray:
        if self.grid_shape is None:
            raise ShapeError("risk map has no grid shape attached")
        return self.weights[i].reshape(self.grid_shape)


COST_PARAMS = 14


@dataclass(frozen=True, eq=False)
class CostMap:
    """``N x T x 14`` raw planner cost parameters.

    Per-step layout: ``[0:4]`` Q diagonal, ``[4:8]`` R row-major, ``[8:12]`` G, ``[12:14]`` H.
    """

    params: np.ndarray

    def __post_init__(self):
        p = _frozen(self.params)
        if p.ndim != 3 or p.shape[2] != COST_PARAMS:
            raise ShapeError(f"cost map must be N x T x {COST_PARAMS}, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise NumericError("cost map contains non-finite values")
        object.__setattr__(self, "params", p)

    def vehicle(self, i: int) -> np.ndarray:
        return self.params[i]


@dataclass(frozen=True)
class VehicleRecord:
    id: int
    x: float
    y: float
    heading: float
    speed: float
    length: float = 4.5
    width: float = 1.9
    l_fr: float = 2.7

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise GeometryError(f"vehicle {self.id}: box size must be positive")
        if not 0.0 < self.l_fr < self.length:
            raise GeometryError(f"vehicle {self.id}: l_fr={self.l_fr} must lie in (0, length={self.length})")

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed])

    def cell(self, spec: GridSpec) -> tuple[int, int]:
        return world_to_cell((self.x, self.y), spec)

    def with_pose(self, x: float, y: float, heading: float, speed: float) -> "VehicleRecord":
        return VehicleRecord(self.id, float(x), float(y), float(heading), float(speed),
                             self.length, self.width, self.l_fr)

    def to_dict(self) -> dict:
        return {"id": self.id, "x": self.x, "y": self.y, "heading": self.heading, "speed": self.speed,
                "length": self.length, "width": self.width, "l_fr": self.l_fr}

    @classmethod
    def from_dict(cls, d: dict) -> "VehicleRecord":
        return cls(int(d["id"]), float(d["x"]), float(d["y"]), float(d["heading"]), float(d["speed"]),
                   float(d["length"]), float(d["width"]), float(d["l_fr"]))


@dataclass(frozen=True, eq=False)
class Scenario:
    """A synthetic multi-vehicle episode.

    ``history`` is ``N x T_his x 4`` poses ``(x, y, heading, speed)`` ending with the
    current frame; ``future`` is ``N x (T-1) x 4`` ground-truth poses after it.
    Vehicle 0 is the ego vehicle.
    """

    grid: GridSpec
    vehicles: tuple[VehicleRecord, ...]
    history: np.ndarray
    future: np.ndarray
    features: FeatureGrid
    gt_occupancy: OccupancyGrid
    gt_flow: FlowField
    dt: float = DEFAULT_DT
    history_dt: float = DEFAULT_DT
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "vehicles", tuple(self.vehicles))
        n = len(self.vehicles)
        hist = _frozen(self.history)
        fut = _frozen(self.future)
        if hist.ndim != 3 or hist.shape[0] != n or hist.shape[2] != 4 or hist.shape[1] < 1:
            raise ShapeError(f"history must be N x T_his x 4 with N={n}, got {hist.shape}")
        if fut.ndim != 3 or fut.shape[0] != n or fut.shape[2] != 4:
            raise ShapeError(f"future must be N x (T-1) x 4 with N={n}, got {fut.shape}")
        if fut.shape[1] != self.gt_occupancy.horizon - 1:
            raise ShapeError(f"future length {fut.shape[1]} != horizon - 1 = {self.gt_occupancy.horizon - 1}")
        if self.gt_occupancy.values.shape[1:] != self.grid.shape:
            raise ShapeError("ground-truth occupancy does not match grid shape")
        if self.features.values.shape[:2] != self.grid.shape:
            raise ShapeError("feature grid does not match grid shape")
        self.gt_flow.check_pair(self.gt_occupancy)
        for v in self.vehicles:
            world_to_cell((v.x, v.y), self.grid)
        object.__setattr__(self, "history", hist)
        object.__setattr__(self, "future", fut)

    @property
    def num_vehicles(self) -> int:
        return len(self.vehicles)

    @property
    def horizon(self) -> int:
        return self.gt_occupancy.horizon

    @property
    def history_length(self) -> int:
        return self.history.shape[1]

    def vehicle_cells(self) -> list[tuple[int, int]]:
        return [v.cell(self.grid) for v in self.vehicles]
