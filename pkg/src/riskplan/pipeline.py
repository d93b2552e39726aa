"""End-to-end glue: features -> risk attention -> cost map -> per-vehicle plans."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .attention import AttentionParams, position_embedding, risk_cross_attention
from .grid import COST_PARAMS, CostMap, GridSpec, OccupancyGrid, RiskMap, Scenario, cell_centers, rasterize_vehicles
from .learning import DemoSample
from .planner import V_MAX, CostDecoder, PlannedTrajectory, decode_cost_map, plan
from .sim import FEATURE_CHANNELS, OracleConfig, DemonstrationSet

DEFAULT_HEADS = 2


@dataclass(frozen=True, eq=False)
class PipelineParams:
    attention: AttentionParams
    decoder: CostDecoder

    @classmethod
    def initial(cls, horizon: int = 7, *, channels: int = FEATURE_CHANNELS, heads: int = DEFAULT_HEADS,
                seed: int = 0, base: str = "cruise", oracle: OracleConfig | None = None) -> "PipelineParams":
        """Random attention and a decoder that starts from an archetype's tiled cost rows."""
        oracle = oracle or OracleConfig(horizon=horizon)
        return cls(AttentionParams.random(channels, heads, seed=seed),
                   CostDecoder.from_rows(oracle.rows(base), channels))

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.attention.tensors(), **self.decoder.tensors()}

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "PipelineParams":
        return cls(AttentionParams.from_tensors(t), CostDecoder.from_tensors(t))

    def with_decoder(self, decoder: CostDecoder) -> "PipelineParams":
        return PipelineParams(self.attention, decoder)


@lru_cache(maxsize=8)
def _grid_embedding(spec: GridSpec, dim: int) -> np.ndarray:
    e = position_embedding(cell_centers(spec), dim)
    e.setflags(write=False)
    return e


def grid_position_embedding(spec: GridSpec, dim: int) -> np.ndarray:
    """Cached sinusoidal embedding of every cell center, row-major."""
    return _grid_embedding(spec, dim)


def scenario_risk(scenario: Scenario, attention: AttentionParams):
    """``(risk_features (N, C), RiskMap)`` for every vehicle in the scenario."""
    pos = grid_position_embedding(scenario.grid, scenario.features.channels)
    return risk_cross_attention(scenario.features, scenario.vehicle_cells(), attention, pos)


@dataclass(frozen=True, eq=False)
class ScenarioPlan:
    trajectories: tuple
    risk_map: RiskMap
    cost_map: CostMap
    risk_features: np.ndarray


def scenario_cost(scenario: Scenario, params: PipelineParams, cost_rows: np.ndarray | None = None):
    """``(risk_features, RiskMap, CostMap)``; ``cost_rows`` (N x T x 14) bypasses the decoder."""
    feats, risk = scenario_risk(scenario, params.attention)
    if cost_rows is None:
        cost = decode_cost_map(feats, params.decoder)
    else:
        cost = CostMap(np.asarray(cost_rows, dtype=np.float64).reshape(scenario.num_vehicles, -1, COST_PARAMS))
    return feats, risk, cost


def plan_scenario(scenario: Scenario, params: PipelineParams, v_max: float = V_MAX,
                  cost_rows: np.ndarray | None = None) -> ScenarioPlan:
    """Plan every vehicle of the scenario."""
    feats, risk, cost = scenario_cost(scenario, params, cost_rows)
    trajs = tuple(plan(v, cost.vehicle(i), scenario, v_max=v_max) for i, v in enumerate(scenario.vehicles))
    return ScenarioPlan(trajs, risk, cost, feats)


def demo_samples(scenarios: Sequence[Scenario], demos: Sequence[DemonstrationSet], attention: AttentionParams,
                 ego_only: bool = False) -> list[DemoSample]:
    """Training samples: one per vehicle, with the other vehicles' demonstrated futures."""
    out = []
    for si, (sc, d) in enumerate(zip(scenarios, demos)):
        feats, _ = scenario_risk(sc, attention)
        futures = d.futures()
        for i, v in enumerate(sc.vehicles):
            if ego_only and i != 0:
                continue
            others = tuple(f for j, f in enumerate(futures) if j != i)
            out.append(DemoSample(v, feats[i], futures[i], others, sc.dt, si, i == 0))
    return out


def trajectory_occupancy(trajectories: Sequence[PlannedTrajectory], vehicles, spec: GridSpec,
                         blur: float = 0.0, dt: float = 0.5) -> OccupancyGrid:
    """Rasterize each vehicle's footprint along its trajectory, optionally blurred into soft occupancy."""
    vehicles = list(vehicles)
    steps = trajectories[0].poses.shape[0] if trajectories else 1
    occ = np.zeros((steps,) + spec.shape)
    for traj, v in zip(trajectories, vehicles):
        for k, pose in enumerate(traj.poses):
            occ[k] = np.maximum(occ[k], rasterize_vehicles([v.with_pose(*pose)], spec, clip=True))
    if blur > 0:
        for k in range(steps):
            occ[k] = gaussian_filter(occ[k], blur, mode="constant")
    return OccupancyGrid(np.clip(occ, 0.0, 1.0), dt)
