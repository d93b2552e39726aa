"""Experiment suites: corrupt shared poses, plan, and score against clean demonstrations."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RiskPlanError, SuiteError
from .grid import GridSpec
from .metrics import AS_PRINTED, DEFAULT_CR_THRESHOLD, ade, min_center_distance, occupancy_auc, soft_iou
from .pipeline import PipelineParams, plan_scenario, trajectory_occupancy
from .planner import V_MAX
from .sim import (DemonstrationSet, NoiseConfig, OracleConfig, ScenarioConfig, corrupt, generate_demonstrations,
                  generate_scenario, scenario_seed)

log = logging.getLogger(__name__)

DEFAULT_SIGMAS = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_DELAYS = (0.0, 100.0, 200.0, 300.0, 400.0, 500.0)
MAX_FAILURE_FRACTION = 0.1
PREDICTION_BLUR = 1.0  # cells; turns planned footprints into soft occupancy


@dataclass
class ScenarioRecord:
    index: int
    seed: int | None
    ade: float = math.nan
    min_distance: float = math.nan
    error: str = ""


@dataclass
class Evaluation:
    ade: float
    collision_rate: float
    auc: float
    soft_iou: float
    evaluated: int
    failures: int
    records: list = field(default_factory=list)


def score(plans, observed, clean, demos, *, cr_threshold: float = DEFAULT_CR_THRESHOLD,
          formula_mode: str = AS_PRINTED, records=None) -> Evaluation:
    """Score per-scenario plans against the clean scenarios' demonstrations.

    ``plans[i]`` is a sequence of trajectories for scenario ``i`` or ``None`` when
    planning failed.  ADE averages every vehicle's future; CR uses the ego plan
    against the other vehicles' demonstrations.  Predicted occupancy is the
    blurred footprint of the plans, ground truth the binary footprint of the
    demonstrations.
    """
    records = records if records is not None else [ScenarioRecord(i, sc.seed) for i, sc in enumerate(clean)]
    ades, hits, preds, gts, ious = [], [], [], [], []
    for rec, p, obs, sc, d in zip(records, plans, observed, clean, demos):
        if p is None or sc.num_vehicles == 0:
            continue
        per_vehicle = [ade(a, b) for a, b in zip(p, d.trajectories)]
        rec.ade = float(np.mean(per_vehicle))
        ades.extend(per_vehicle)
        futures = d.futures()
        rec.min_distance = min_center_distance(p[0], futures[1:]) if len(futures) > 1 else math.inf
        hits.append(rec.min_distance < cr_threshold)
        pred = trajectory_occupancy(p, obs.vehicles, sc.grid, blur=PREDICTION_BLUR, dt=sc.dt)
        gt = trajectory_occupancy(d.trajectories, sc.vehicles, sc.grid, dt=sc.dt)
        preds.append(pred.values)
        gts.append(gt.values)
        ious.append(soft_iou(pred, gt, formula_mode))
    failures = sum(1 for r in records if r.error)
    if not hits:
        return Evaluation(math.nan, math.nan, math.nan, math.nan, 0, failures, records)
    auc = occupancy_auc(np.concatenate(preds), np.concatenate(gts))
    return Evaluation(float(np.mean(ades)), float(np.mean(hits)), auc, float(np.mean(ious)),
                      len(hits), failures, records)


def evaluate(observed, clean, demos, params: PipelineParams, *, v_max: float = V_MAX,
             cr_threshold: float = DEFAULT_CR_THRESHOLD, formula_mode: str = AS_PRINTED,
             cost_rows=None) -> Evaluation:
    """Plan from ``observed`` scenarios, then :func:`score` against ``clean``.

    Scenarios whose planning raises a package error are logged and skipped.
    """
    records, plans = [], []
    for i, (obs, sc) in enumerate(zip(observed, clean)):
        rec = ScenarioRecord(i, sc.seed)
        records.append(rec)
        try:
            rows = None if cost_rows is None else cost_rows[i]
            plans.append(plan_scenario(obs, params, v_max, rows).trajectories if sc.num_vehicles else None)
        except RiskPlanError as exc:
            rec.error = f"{type(exc).__name__}: {exc}"
            log.warning("scenario %d (seed %s) failed: %s", i, sc.seed, rec.error)
            plans.append(None)
    return score(plans, observed, clean, demos, cr_threshold=cr_threshold, formula_mode=formula_mode,
                 records=records)


@dataclass(frozen=True)
class SuiteConfig:
    scenario: ScenarioConfig = ScenarioConfig()
    oracle: OracleConfig = OracleConfig()
    scenarios_per_cell: int = 20
    seed: int = 0
    sigmas: tuple = DEFAULT_SIGMAS  # paired: sigma_pos [m] == sigma_heading [deg]
    delays_ms: tuple = DEFAULT_DELAYS
    v_max: float = V_MAX
    cr_threshold: float = DEFAULT_CR_THRESHOLD
    formula_mode: str = AS_PRINTED
    workers: int = 1

    def __post_init__(self):
        if self.scenarios_per_cell < 1:
            raise ConfigError("scenarios_per_cell must be >= 1")
        if not self.sigmas or not self.delays_ms:
            raise ConfigError("sweep needs at least one noise level and one delay")
        if any(s < 0 for s in self.sigmas) or any(d < 0 for d in self.delays_ms):
            raise ConfigError("noise levels and delays must be non-negative")

    def cells(self) -> list[tuple[float, float]]:
        return [(s, d) for s in self.sigmas for d in self.delays_ms]

    def scenario_seed(self, i: int) -> int:
        return scenario_seed(self.seed, i)

    def noise_seed(self, i: int) -> int:
        return int(np.random.SeedSequence([self.seed, i]).generate_state(1, np.uint64)[0])


@dataclass
class SuiteRow:
    sigma_pos: float
    sigma_heading: float
    delay_ms: float
    result: Evaluation

    COLUMNS = ("sigma_pos", "sigma_heading", "delay_ms", "ade", "cr", "auc", "soft_iou", "evaluated", "failures")

    def values(self) -> tuple:
        r = self.result
        return (self.sigma_pos, self.sigma_heading, self.delay_ms, r.ade, r.collision_rate, r.auc, r.soft_iou,
                r.evaluated, r.failures)


@dataclass
class SuiteReport:
    rows: list

    def row(self, sigma: float, delay_ms: float) -> SuiteRow:
        for r in self.rows:
            if r.sigma_pos == sigma and r.delay_ms == delay_ms:
                return r
        raise KeyError((sigma, delay_ms))


def clean_suite(cfg: SuiteConfig):
    scenarios = [generate_scenario(cfg.scenario, cfg.scenario_seed(i)) for i in range(cfg.scenarios_per_cell)]
    demos = [generate_demonstrations(s, cfg.oracle, cfg.v_max) for s in scenarios]
    return scenarios, demos


def run_cell(cfg: SuiteConfig, params: PipelineParams, scenarios, demos: list[DemonstrationSet],
             sigma: float, delay_ms: float) -> SuiteRow:
    observed = []
    errors = {}
    for i, sc in enumerate(scenarios):
        try:
            observed.append(corrupt(sc, NoiseConfig(sigma, sigma, delay_ms, cfg.noise_seed(i))))
        except RiskPlanError as exc:
            errors[i] = f"{type(exc).__name__}: {exc}"
            observed.append(None)
    keep = [i for i in range(len(scenarios)) if i not in errors]
    res = evaluate([observed[i] for i in keep], [scenarios[i] for i in keep], [demos[i] for i in keep], params,
                   v_max=cfg.v_max, cr_threshold=cfg.cr_threshold, formula_mode=cfg.formula_mode)
    for rec in res.records:
        rec.index = keep[rec.index]
    res.records.extend(ScenarioRecord(i, scenarios[i].seed, error=e) for i, e in errors.items())
    res.records.sort(key=lambda r: r.index)
    res.failures += len(errors)
    if res.failures > MAX_FAILURE_FRACTION * len(scenarios):
        raise SuiteError(f"cell sigma={sigma} delay={delay_ms} ms: {res.failures} of {len(scenarios)} scenarios failed")
    log.info("cell sigma=%.2f delay=%.0f ms ade=%.4f cr=%.3f", sigma, delay_ms, res.ade, res.collision_rate)
    return SuiteRow(sigma, sigma, delay_ms, res)


def _cell_job(args):
    return run_cell(*args)


def run_suite(cfg: SuiteConfig, params: PipelineParams) -> SuiteReport:
    """One row per (noise, delay) cell, in sweep order.

    Every cell reuses the same clean scenarios and per-scenario noise seeds, so
    cells differ only in corruption strength.
    """
    scenarios, demos = clean_suite(cfg)
    jobs = [(cfg, params, scenarios, demos, s, d) for s, d in cfg.cells()]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            rows = list(pool.map(_cell_job, jobs))
    else:
        rows = [_cell_job(j) for j in jobs]
    return SuiteReport(rows)


SUITE_FORMAT_VERSION = 1


def suite_config_to_dict(cfg: SuiteConfig) -> dict:
    sc = cfg.scenario
    oc = cfg.oracle
    return {
        "format_version": SUITE_FORMAT_VERSION,
        "scenario": {"grid": sc.grid.to_dict(), "min_vehicles": sc.min_vehicles, "max_vehicles": sc.max_vehicles,
                     "horizon": sc.horizon, "history_length": sc.history_length, "dt": sc.dt,
                     "history_dt": sc.history_dt, "lanes": list(sc.lanes), "speed_range": list(sc.speed_range),
                     "x_span": sc.x_span, "conflict": sc.conflict, "max_retries": sc.max_retries},
        "oracle": {"archetypes": list(oc.archetypes), "mix": list(oc.mix), "horizon": oc.horizon, "seed": oc.seed,
                   "weights": None if oc.weights is None
                   else {k: np.asarray(v).tolist() for k, v in sorted(oc.weights.items())}},
        "scenarios_per_cell": cfg.scenarios_per_cell, "seed": cfg.seed, "sigmas": list(cfg.sigmas),
        "delays_ms": list(cfg.delays_ms), "v_max": cfg.v_max, "cr_threshold": cfg.cr_threshold,
        "formula_mode": cfg.formula_mode, "workers": cfg.workers,
    }


def suite_config_from_dict(d: dict) -> SuiteConfig:
    """Inverse of :func:`suite_config_to_dict`; missing keys take their defaults."""
    if d.get("format_version", SUITE_FORMAT_VERSION) != SUITE_FORMAT_VERSION:
        raise ConfigError(f"unsupported suite format_version {d.get('format_version')!r}")
    known = {"format_version", "scenario", "oracle", "scenarios_per_cell", "seed", "sigmas", "delays_ms", "v_max",
             "cr_threshold", "formula_mode", "workers"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown suite config keys: {sorted(unknown)}")
    try:
        s = dict(d.get("scenario", {}))
        if "grid" in s:
            s["grid"] = GridSpec.from_dict(s["grid"])
        for k in ("lanes", "speed_range"):
            if k in s:
                s[k] = tuple(s[k])
        o = dict(d.get("oracle", {}))
        for k in ("archetypes", "mix"):
            if k in o:
                o[k] = tuple(o[k])
        top = {k: d[k] for k in known - {"format_version", "scenario", "oracle"} if k in d}
        for k in ("sigmas", "delays_ms"):
            if k in top:
                top[k] = tuple(float(x) for x in top[k])
        return SuiteConfig(ScenarioConfig(**s), OracleConfig(**o), **top)
    except TypeError as exc:
        raise ConfigError(f"invalid suite config: {exc}") from exc
