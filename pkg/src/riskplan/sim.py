"""Synthetic scenarios, oracle demonstrations and V2X corruption.

Every random draw goes through ``numpy.random.default_rng`` (PCG64) seeded
explicitly, so a scenario is a pure function of ``(config, seed)``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .dynamics import wrap_angle
from .errors import ConfigError, InsufficientHistory, PlacementError
from .grid import (
    DEFAULT_DT,
    DEFAULT_HISTORY,
    DEFAULT_HORIZON,
    COST_PARAMS,
    FeatureGrid,
    FlowField,
    GridSpec,
    OccupancyGrid,
    Scenario,
    VehicleRecord,
    rasterize_vehicles,
)
from .planner import V_MAX, PlannedTrajectory, plan

FEATURE_CHANNELS = 8
OCCUPANCY_BLURS = (0.5, 1.5, 4.0)
SPEED_SCALE = 10.0


# --- feature / ground-truth synthesis ----------------------------------------------------

def synthesize_features(vehicles, spec: GridSpec) -> FeatureGrid:
    """Hand-crafted ``H x W x 8`` features from the current layout.

    Channels: occupancy blurred at three radii, velocity relative to vehicle 0
    (x, y), speed, and heading (cos, sin); the last four are masked by each
    vehicle's footprint and lightly blurred.  Speeds are divided by 10 m/s.
    """
    h, w = spec.shape
    out = np.zeros((h, w, FEATURE_CHANNELS))
    vehicles = list(vehicles)
    if not vehicles:
        return FeatureGrid(out)
    occ = rasterize_vehicles(vehicles, spec, clip=True)
    for c, sigma in enumerate(OCCUPANCY_BLURS):
        out[:, :, c] = gaussian_filter(occ, sigma, mode="constant")
    ego = vehicles[0]
    evx, evy = ego.speed * math.cos(ego.heading), ego.speed * math.sin(ego.heading)
    motion = np.zeros((h, w, 5))
    for v in vehicles:
        mask = rasterize_vehicles([v], spec, clip=True) > 0
        vx, vy = v.speed * math.cos(v.heading), v.speed * math.sin(v.heading)
        motion[mask] = [(vx - evx) / SPEED_SCALE, (vy - evy) / SPEED_SCALE, v.speed / SPEED_SCALE,
                        math.cos(v.heading), math.sin(v.heading)]
    for c in range(5):
        out[:, :, 3 + c] = gaussian_filter(motion[:, :, c], 1.0, mode="constant")
    return FeatureGrid(out)


def _posed(vehicle: VehicleRecord, pose) -> VehicleRecord:
    return vehicle.with_pose(pose[0], pose[1], pose[2], pose[3])


def ground_truth_grids(vehicles, future: np.ndarray, spec: GridSpec, dt: float = DEFAULT_DT):
    """Binary occupancy over ``T`` steps (now plus future) and the per-step cell flow."""
    vehicles = list(vehicles)
    t = future.shape[1] + 1
    occ = np.zeros((t,) + spec.shape)
    flow = np.zeros((t - 1,) + spec.shape + (2,))
    for i, v in enumerate(vehicles):
        poses = np.vstack([v.pose[None], future[i]])
        prev_mask = None
        for k in range(t):
            mask = rasterize_vehicles([_posed(v, poses[k])], spec, clip=True) > 0
            occ[k][mask] = 1.0
            if k > 0:
                d_row = (poses[k, 1] - poses[k - 1, 1]) / spec.cell_size
                d_col = (poses[k, 0] - poses[k - 1, 0]) / spec.cell_size
                flow[k - 1][prev_mask] = (d_row, d_col)
            prev_mask = mask
    return OccupancyGrid(occ, dt), FlowField(flow)


def build_scenario(grid: GridSpec, vehicles, history, future, *, dt: float = DEFAULT_DT,
                   history_dt: float = DEFAULT_DT, seed: int | None = None, meta: dict | None = None) -> Scenario:
    """Assemble a scenario, deriving features and ground-truth grids from the layout."""
    vehicles = tuple(vehicles)
    future = np.asarray(future, dtype=np.float64)
    history = np.asarray(history, dtype=np.float64)
    occ, flow = ground_truth_grids(vehicles, future, grid, dt)
    return Scenario(grid, vehicles, history, future, synthesize_features(vehicles, grid), occ, flow,
                    dt, history_dt, seed, dict(meta or {}))


def with_current_poses(scenario: Scenario, vehicles) -> Scenario:
    """Copy of ``scenario`` with new reported current poses; ground truth untouched."""
    vehicles = tuple(vehicles)
    hist = np.array(scenario.history)
    for i, v in enumerate(vehicles):
        hist[i, -1] = v.pose
    return dataclasses.replace(scenario, vehicles=vehicles, history=hist,
                               features=synthesize_features(vehicles, scenario.grid))


# --- scenario generation -----------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    grid: GridSpec = GridSpec()
    min_vehicles: int = 3
    max_vehicles: int = 6
    horizon: int = DEFAULT_HORIZON
    history_length: int = DEFAULT_HISTORY
    dt: float = DEFAULT_DT
    history_dt: float = DEFAULT_DT
    lanes: tuple = (-10.0, -5.0, 0.0, 5.0, 10.0)
    speed_range: tuple = (2.0, 14.0)
    x_span: float = 25.0
    conflict: bool = False
    max_retries: int = 200

    def __post_init__(self):
        if self.min_vehicles < 0 or self.max_vehicles < self.min_vehicles:
            raise ConfigError(f"invalid vehicle count range ({self.min_vehicles}, {self.max_vehicles})")
        if self.horizon < 2 or self.history_length < 1:
            raise ConfigError("horizon must be >= 2 and history length >= 1")


def scenario_seed(base: int, index: int) -> int:
    """Seed of the ``index``-th scenario in a suite seeded with ``base``."""
    return base * 100_003 + index


def _straight(v: VehicleRecord, times: np.ndarray) -> np.ndarray:
    c, s = math.cos(v.heading), math.sin(v.heading)
    return np.stack([v.x + v.speed * c * times, v.y + v.speed * s * times,
                     np.full_like(times, v.heading), np.full_like(times, v.speed)], axis=1)


def _separated(a: VehicleRecord, b: VehicleRecord, margin: float = 1.0) -> bool:
    return math.hypot(a.x - b.x, a.y - b.y) > 0.5 * (a.length + b.length) + margin


def generate_scenario(cfg: ScenarioConfig = ScenarioConfig(), seed: int = 0) -> Scenario:
    """Place vehicles in lanes without overlap and roll them forward/backward at constant velocity.

    Lanes with ``y < 0`` or ``y == 0`` drive towards +x, lanes with ``y > 0`` towards -x.
    Vehicle 0 (ego) sits in the ``y = 0`` lane.  With ``cfg.conflict`` a slower
    lead vehicle is placed ahead of the ego in its lane.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(cfg.min_vehicles, cfg.max_vehicles + 1))
    past = -cfg.history_dt * np.arange(cfg.history_length - 1, -1, -1)
    ahead = cfg.dt * np.arange(1, cfg.horizon)
    lo, hi = cfg.speed_range

    def trajectory_in_grid(v: VehicleRecord) -> bool:
        pts = np.vstack([_straight(v, past), _straight(v, ahead)])
        return all(cfg.grid.contains(x, y) for x, y in pts[:, :2])

    vehicles: list[VehicleRecord] = []
    for i in range(n):
        for _ in range(cfg.max_retries):
            length = float(rng.uniform(4.2, 5.0))
            width = float(rng.uniform(1.8, 2.1))
            l_fr = float(rng.uniform(2.2, 3.2))
            if i == 0:
                lane, x, speed = 0.0, float(rng.uniform(-10.0, 0.0)), float(rng.uniform(max(lo, 8.0), hi))
            elif i == 1 and cfg.conflict:
                ego = vehicles[0]
                lane = 0.0
                x = ego.x + float(rng.uniform(8.0, 30.0))
                speed = float(rng.uniform(0.2, 0.9)) * ego.speed
            else:
                lane = float(rng.choice(cfg.lanes))
                x = float(rng.uniform(-cfg.x_span, cfg.x_span))
                speed = float(rng.uniform(lo, hi))
            heading = (math.pi if lane > 0 else 0.0) + float(rng.normal(0.0, 0.01))
            y = lane + float(rng.normal(0.0, 0.2))
            cand = VehicleRecord(i, x, y, float(wrap_angle(heading)), speed, length, width, l_fr)
            if trajectory_in_grid(cand) and all(_separated(cand, o) for o in vehicles):
                vehicles.append(cand)
                break
        else:
            raise PlacementError(f"could not place vehicle {i} without overlap after {cfg.max_retries} tries")
    history = np.array([_straight(v, past) for v in vehicles]).reshape(n, cfg.history_length, 4)
    future = np.array([_straight(v, ahead) for v in vehicles]).reshape(n, cfg.horizon - 1, 4)
    return build_scenario(cfg.grid, vehicles, history, future, dt=cfg.dt, history_dt=cfg.history_dt,
                          seed=seed, meta={"conflict": cfg.conflict})


# --- oracle demonstrations --------------------------------------------------------------

def archetype_row(name: str) -> np.ndarray:
    """Raw 14-parameter cost rows of the built-in behaviour archetypes."""
    rows = {
        #            Q(s, v, l, phi)         R (row-major)         G (s, v, l, phi)        H
        "cruise": [-6.0, -2.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, -0.4, 0.0, 0.0, 0.0, 0.0, 0.0],
        "brake": [-6.0, 1.0, 0.0, 1.0, -1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        "lane_shift": [-6.0, -2.0, -1.0, 1.0, 1.0, 0.0, 0.0, 0.0, -0.4, 0.0, -1.5, 0.0, 0.0, 0.0],
    }
    if name not in rows:
        raise ConfigError(f"unknown archetype {name!r}")
    return np.array(rows[name], dtype=np.float64)


ARCHETYPES = ("cruise", "brake", "lane_shift")


@dataclass(frozen=True)
class OracleConfig:
    archetypes: tuple = ARCHETYPES
    mix: tuple = (0.6, 0.2, 0.2)
    horizon: int = DEFAULT_HORIZON
    seed: int = 0
    weights: dict | None = None  # name -> T x 14 raw rows; defaults to tiled archetype rows

    def __post_init__(self):
        if len(self.archetypes) != len(self.mix) or not self.archetypes:
            raise ConfigError("archetypes and mix must have the same non-zero length")
        if any(p < 0 for p in self.mix) or abs(sum(self.mix) - 1.0) > 1e-9:
            raise ConfigError(f"mix probabilities must be non-negative and sum to 1, got {self.mix}")

    def rows(self, name: str) -> np.ndarray:
        if self.weights and name in self.weights:
            r = np.asarray(self.weights[name], dtype=np.float64)
            if r.shape != (self.horizon, COST_PARAMS):
                raise ConfigError(f"oracle weights for {name} must be {self.horizon} x {COST_PARAMS}")
            return r
        return np.tile(archetype_row(name), (self.horizon, 1))


@dataclass(frozen=True, eq=False)
class DemonstrationSet:
    trajectories: tuple  # PlannedTrajectory per vehicle
    archetypes: tuple
    weights: np.ndarray  # N x T x 14 generating raw parameters

    def futures(self) -> list[np.ndarray]:
        return [t.future for t in self.trajectories]


def _demo_rng(scenario: Scenario, oracle: OracleConfig) -> np.random.Generator:
    return np.random.default_rng([oracle.seed, 0 if scenario.seed is None else int(scenario.seed)])


def generate_demonstrations(scenario: Scenario, oracle: OracleConfig = OracleConfig(),
                            v_max: float = V_MAX) -> DemonstrationSet:
    rng = _demo_rng(scenario, oracle)
    names, trajs, weights = [], [], []
    for v in scenario.vehicles:
        name = oracle.archetypes[int(rng.choice(len(oracle.archetypes), p=oracle.mix))]
        rows = oracle.rows(name)
        trajs.append(plan(v, rows, scenario, v_max=v_max))
        names.append(name)
        weights.append(rows)
    w = np.array(weights).reshape(len(weights), oracle.horizon, COST_PARAMS)
    return DemonstrationSet(tuple(trajs), tuple(names), w)


# --- V2X corruption ------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    sigma_pos: float = 0.0  # meters
    sigma_heading: float = 0.0  # degrees
    delay_ms: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_pos < 0 or self.sigma_heading < 0 or self.delay_ms < 0:
            raise ConfigError("noise parameters must be non-negative")


def inject_pose_noise(scenario: Scenario, cfg: NoiseConfig) -> Scenario:
    """Gaussian noise on every non-ego vehicle's reported position and heading.

    Positions are clamped to the grid; ground truth and the ego are unchanged.
    """
    if cfg.sigma_pos == 0 and cfg.sigma_heading == 0:
        return scenario
    rng = np.random.default_rng(cfg.seed)
    g = scenario.grid
    out = [scenario.vehicles[0]] if scenario.vehicles else []
    for v in scenario.vehicles[1:]:
        dx, dy = rng.normal(0.0, cfg.sigma_pos, 2)
        dh = math.radians(float(rng.normal(0.0, cfg.sigma_heading)))
        x = min(max(v.x + dx, g.x_range[0]), g.x_range[1])
        y = min(max(v.y + dy, g.y_range[0]), g.y_range[1])
        out.append(v.with_pose(x, y, wrap_angle(v.heading + dh), v.speed))
    return with_current_poses(scenario, out)


def inject_delay(scenario: Scenario, delay_ms: float) -> Scenario:
    """Replace non-ego current poses with the pose ``delay_ms`` earlier, interpolating the history."""
    if delay_ms < 0:
        raise ConfigError("delay must be non-negative")
    if delay_ms == 0:
        return scenario
    t_his = scenario.history_length
    times = -scenario.history_dt * np.arange(t_his - 1, -1, -1)
    target = -delay_ms / 1000.0
    if target < times[0] - 1e-12:
        raise InsufficientHistory(f"delay {delay_ms} ms exceeds recorded history span "
                                  f"{(t_his - 1) * scenario.history_dt * 1000:.0f} ms")
    i = int(np.clip(np.searchsorted(times, target, side="right") - 1, 0, max(t_his - 2, 0)))
    alpha = 0.0 if t_his == 1 else (target - times[i]) / (times[i + 1] - times[i])
    out = [scenario.vehicles[0]] if scenario.vehicles else []
    for n, v in enumerate(scenario.vehicles[1:], start=1):
        a = scenario.history[n, i]
        b = scenario.history[n, min(i + 1, t_his - 1)]
        dh = wrap_angle(b[2] - a[2])
        pose = a + alpha * (b - a)
        out.append(v.with_pose(pose[0], pose[1], wrap_angle(a[2] + alpha * dh), pose[3]))
    return with_current_poses(scenario, out)


def corrupt(scenario: Scenario, noise: NoiseConfig) -> Scenario:
    """Delay first, then pose noise."""
    return inject_pose_noise(inject_delay(scenario, noise.delay_ms), noise)
