import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from riskplan.errors import GeometryError, NumericError, OutOfGrid, ShapeError
from riskplan.grid import (
    CostMap,
    FeatureGrid,
    FlowField,
    GridSpec,
    OccupancyGrid,
    RiskMap,
    VehicleRecord,
    cell_centers,
    cell_to_world,
    flat_index,
    flatten_features,
    rasterize_vehicles,
    world_to_cell,
)

SPEC = GridSpec()


def brute_raster(vehicles, spec):
    out = np.zeros(spec.shape)
    for r in range(spec.height):
        for c in range(spec.width):
            cx, cy = cell_to_world((r, c), spec)
            for v in vehicles:
                dx, dy = cx - v.x, cy - v.y
                lon = dx * math.cos(v.heading) + dy * math.sin(v.heading)
                lat = -dx * math.sin(v.heading) + dy * math.cos(v.heading)
                if abs(lon) < v.length / 2 and abs(lat) < v.width / 2:
                    out[r, c] = 1
    return out


def test_default_grid_dimensions():
    assert SPEC.shape == (100, 176)
    assert SPEC.origin == (-70.4, -40.0)
    assert SPEC.height * SPEC.cell_size == pytest.approx(80.0)
    assert SPEC.width * SPEC.cell_size == pytest.approx(140.8)


def test_range_must_be_multiple_of_cell_size():
    with pytest.raises(GeometryError):
        GridSpec((0.0, 1.0), (0.0, 1.0), 0.3)
    with pytest.raises(GeometryError):
        GridSpec(cell_size=0.0)


def test_origin_corner_maps_to_first_cell():
    assert world_to_cell(SPEC.origin, SPEC) == (0, 0)


def test_grid_center_maps_to_half_dimensions():
    assert world_to_cell((0.0, 0.0), SPEC) == (SPEC.height // 2, SPEC.width // 2)


def test_offset_one_and_a_half_by_two_and_a_half_cells():
    cs = SPEC.cell_size
    x0, y0 = SPEC.origin
    # rows follow y and columns follow x
    assert world_to_cell((x0 + 1.5 * cs, y0 + 2.5 * cs), SPEC) == (2, 1)
    assert world_to_cell((x0 + 2.5 * cs, y0 + 1.5 * cs), SPEC) == (1, 2)


def test_out_of_grid_names_axis():
    with pytest.raises(OutOfGrid) as e:
        world_to_cell((100.0, 0.0), SPEC)
    assert e.value.axis == "x"
    with pytest.raises(OutOfGrid) as e:
        world_to_cell((0.0, -40.5), SPEC)
    assert e.value.axis == "y"


def test_upper_edges_are_inclusive():
    assert world_to_cell((70.4, 40.0), SPEC) == (SPEC.height - 1, SPEC.width - 1)


@given(st.integers(0, 99), st.integers(0, 175))
def test_cell_round_trip(row, col):
    assert world_to_cell(cell_to_world((row, col), SPEC), SPEC) == (row, col)


@given(st.floats(-70.4, 70.4), st.floats(-40.0, 40.0))
def test_world_round_trip_within_half_cell(x, y):
    cx, cy = cell_to_world(world_to_cell((x, y), SPEC), SPEC)
    assert abs(cx - x) <= SPEC.cell_size / 2 + 1e-9
    assert abs(cy - y) <= SPEC.cell_size / 2 + 1e-9


def test_cell_centers_are_row_major():
    spec = GridSpec((0.0, 4.0), (0.0, 3.0), 1.0)
    centers = cell_centers(spec)
    assert centers.shape == (12, 2)
    assert tuple(centers[flat_index((1, 2), spec)]) == cell_to_world((1, 2), spec)


def test_empty_raster():
    assert rasterize_vehicles([], SPEC).sum() == 0


def test_two_cell_vehicle():
    cs = SPEC.cell_size
    # centered on the shared edge of two cells along x
    x = SPEC.origin[0] + 10 * cs
    y = SPEC.origin[1] + 5.5 * cs
    v = VehicleRecord(0, x, y, 0.0, 0.0, length=2 * cs, width=cs, l_fr=cs)
    occ = rasterize_vehicles([v], SPEC)
    assert occ.sum() == 2
    assert occ[5, 9] == 1 and occ[5, 10] == 1
    np.testing.assert_array_equal(occ, brute_raster([v], SPEC))


def test_disjoint_vehicles_or_together():
    a = VehicleRecord(0, -10, 3, 0.3, 5)
    b = VehicleRecord(1, 20, -7, -1.2, 5)
    both = rasterize_vehicles([a, b], SPEC)
    np.testing.assert_array_equal(both, np.maximum(rasterize_vehicles([a], SPEC), rasterize_vehicles([b], SPEC)))


vehicle_st = st.builds(
    VehicleRecord,
    id=st.integers(0, 10),
    x=st.floats(-60, 60),
    y=st.floats(-30, 30),
    heading=st.floats(-math.pi, math.pi),
    speed=st.just(0.0),
    length=st.floats(3.0, 6.0),
    width=st.floats(1.5, 2.5),
    l_fr=st.just(2.0),
)


@given(st.lists(vehicle_st, min_size=1, max_size=4), st.randoms(use_true_random=False))
def test_raster_permutation_invariant(vehicles, rnd):
    shuffled = list(vehicles)
    rnd.shuffle(shuffled)
    np.testing.assert_array_equal(rasterize_vehicles(vehicles, SPEC), rasterize_vehicles(shuffled, SPEC))


@given(vehicle_st)
def test_raster_matches_brute_force(v):
    spec = GridSpec((-64.0, 64.0), (-32.0, 32.0), 1.6)
    if not spec.contains(v.x, v.y):
        return
    np.testing.assert_array_equal(rasterize_vehicles([v], spec), brute_raster([v], spec))


def test_raster_rejects_vehicle_outside():
    with pytest.raises(OutOfGrid):
        rasterize_vehicles([VehicleRecord(0, 80, 0, 0, 0)], SPEC)
    assert rasterize_vehicles([VehicleRecord(0, 80, 0, 0, 0)], SPEC, clip=True).sum() == 0


def test_flatten_order():
    one = FeatureGrid(np.arange(3.0).reshape(1, 1, 3))
    np.testing.assert_array_equal(flatten_features(one), [[0, 1, 2]])
    vals = np.arange(8.0).reshape(2, 2, 2)
    flat = flatten_features(FeatureGrid(vals))
    np.testing.assert_array_equal(flat, [vals[0, 0], vals[0, 1], vals[1, 0], vals[1, 1]])
    grid = np.random.default_rng(0).normal(size=(3, 4, 5))
    np.testing.assert_array_equal(flatten_features(FeatureGrid(grid))[6], grid[1, 2])


def test_feature_grid_rejects_non_finite():
    with pytest.raises(NumericError):
        FeatureGrid(np.array([[[np.nan]]]))


def test_occupancy_flow_coupling():
    occ = OccupancyGrid(np.zeros((7, 4, 5)))
    FlowField(np.zeros((6, 4, 5, 2))).check_pair(occ)
    with pytest.raises(ShapeError):
        FlowField(np.zeros((7, 4, 5, 2))).check_pair(occ)
    with pytest.raises(NumericError):
        OccupancyGrid(np.full((1, 2, 2), 1.5))
    assert OccupancyGrid(np.ones((1, 2, 2))).is_binary


def test_risk_map_rows_must_be_distributions():
    RiskMap(np.full((2, 4), 0.25), (2, 2))
    with pytest.raises(NumericError):
        RiskMap(np.full((1, 4), 0.3))
    with pytest.raises(NumericError):
        RiskMap(np.array([[1.5, -0.5]]))


def test_cost_map_layout():
    with pytest.raises(ShapeError):
        CostMap(np.zeros((1, 7, 13)))
    with pytest.raises(NumericError):
        CostMap(np.full((1, 7, 14), np.inf))


def test_vehicle_axle_distance_bounds():
    with pytest.raises(GeometryError):
        VehicleRecord(0, 0, 0, 0, 0, length=4.0, l_fr=4.0)
    with pytest.raises(GeometryError):
        VehicleRecord(0, 0, 0, 0, 0, l_fr=0.0)


def test_containers_are_immutable():
    occ = OccupancyGrid(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        occ.values[0, 0, 0] = 1.0
