import dataclasses
import json

import numpy as np
import pytest

from riskplan.errors import ConfigError, SuiteError
from riskplan.harness import (
    SuiteConfig,
    SuiteRow,
    clean_suite,
    evaluate,
    run_cell,
    run_suite,
    suite_config_from_dict,
    suite_config_to_dict,
)
from riskplan.metrics import STANDARD
from riskplan.pipeline import PipelineParams, demo_samples, plan_scenario, trajectory_occupancy
from riskplan.sim import OracleConfig, ScenarioConfig, generate_demonstrations, generate_scenario

SMALL = SuiteConfig(scenarios_per_cell=3, seed=5, sigmas=(0.0, 1.0), delays_ms=(0.0, 500.0))
PARAMS = PipelineParams.initial()


def test_default_sweep_has_36_cells():
    cells = SuiteConfig().cells()
    assert len(cells) == 36
    assert cells[0] == (0.0, 0.0) and cells[-1] == (1.0, 500.0)


def test_zero_noise_cell_equals_direct_evaluation():
    scenarios, demos = clean_suite(SMALL)
    row = run_cell(SMALL, PARAMS, scenarios, demos, 0.0, 0.0)
    direct = evaluate(scenarios, scenarios, demos, PARAMS)
    assert row.values()[3:] == SuiteRow(0, 0, 0, direct).values()[3:]


def test_suite_is_reproducible():
    a, b = run_suite(SMALL, PARAMS), run_suite(SMALL, PARAMS)
    assert [r.values() for r in a.rows] == [r.values() for r in b.rows]
    assert len(a.rows) == 4
    for r in a.rows:
        assert 0.0 <= r.result.collision_rate <= 1.0
        assert r.result.evaluated == 3 and r.result.failures == 0
    assert a.row(1.0, 0.0).result.ade >= a.row(0.0, 0.0).result.ade


def test_parallel_suite_matches_serial():
    par = run_suite(dataclasses.replace(SMALL, workers=2), PARAMS)
    ser = run_suite(SMALL, PARAMS)
    assert [r.values() for r in par.rows] == [r.values() for r in ser.rows]


def test_oracle_weights_reproduce_demonstrations():
    scenarios, demos = clean_suite(SMALL)
    res = evaluate(scenarios, scenarios, demos, PARAMS, cost_rows=[d.weights for d in demos])
    assert res.ade <= 1e-9


def test_cell_with_too_many_failures_raises():
    scenarios, demos = clean_suite(SMALL)
    with pytest.raises(SuiteError):
        run_cell(SMALL, PARAMS, scenarios, demos, 0.0, 5000.0)


def test_suite_config_round_trip():
    cfg = SuiteConfig(ScenarioConfig(conflict=True, max_vehicles=4), OracleConfig(archetypes=("brake",), mix=(1.0,)),
                      scenarios_per_cell=4, seed=9, sigmas=(0.0, 0.5), delays_ms=(0.0,), formula_mode=STANDARD)
    doc = json.loads(json.dumps(suite_config_to_dict(cfg)))
    assert suite_config_from_dict(doc) == cfg
    with pytest.raises(ConfigError):
        suite_config_from_dict({**doc, "bogus": 1})
    with pytest.raises(ConfigError):
        suite_config_from_dict({**doc, "format_version": 99})
    with pytest.raises(ConfigError):
        SuiteConfig(scenarios_per_cell=0)


def test_pipeline_pieces():
    sc = generate_scenario(seed=2)
    out = plan_scenario(sc, PARAMS)
    assert len(out.trajectories) == sc.num_vehicles
    assert out.risk_map.weights.shape == (sc.num_vehicles, 100 * 176)
    np.testing.assert_allclose(out.risk_map.weights.sum(axis=1), 1.0, atol=1e-6)
    demos = generate_demonstrations(sc)
    samples = demo_samples([sc], [demos], PARAMS.attention)
    assert len(samples) == sc.num_vehicles and samples[0].is_ego
    assert len(samples[0].others) == sc.num_vehicles - 1
    assert len(demo_samples([sc], [demos], PARAMS.attention, ego_only=True)) == 1
    occ = trajectory_occupancy(demos.trajectories, sc.vehicles, sc.grid)
    np.testing.assert_array_equal(occ.values[0], sc.gt_occupancy.values[0])
    soft = trajectory_occupancy(demos.trajectories, sc.vehicles, sc.grid, blur=1.0)
    assert 0 < soft.values.max() <= 1.0
    p2 = PipelineParams.from_tensors(PARAMS.tensors())
    np.testing.assert_array_equal(p2.decoder.bias, PARAMS.decoder.bias)
