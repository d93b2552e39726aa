import numpy as np

from riskplan.grid import GridSpec
from riskplan.render import (
    compose,
    heat_colors,
    normalize,
    pixel_to_cell,
    read_ppm,
    render_heatmap,
    svg_document,
    world_to_pixel,
    write_ppm,
)

SPEC = GridSpec((-4.0, 4.0), (-2.4, 2.4), 0.8)


def test_uniform_map_is_single_color():
    img = render_heatmap(np.full(SPEC.shape, 1 / 60), scale=3)
    assert img.shape == (18, 30, 3)
    assert len(np.unique(img.reshape(-1, 3), axis=0)) == 1


def test_argmax_pixel_maps_to_argmax_cell():
    rng = np.random.default_rng(4)
    for _ in range(20):
        risk = rng.random(SPEC.shape)
        img = render_heatmap(risk, scale=4).astype(int)
        py, px = np.unravel_index(np.argmax(img.sum(axis=2)), img.shape[:2])
        assert pixel_to_cell(py, px, SPEC.shape, 4) == np.unravel_index(np.argmax(risk), risk.shape)


def test_ramp_endpoints():
    np.testing.assert_array_equal(heat_colors(np.array([0.0, 1.0])), [[0, 0, 0], [255, 255, 255]])
    t, lo, hi = normalize(np.array([[2.0, 4.0]]))
    assert (lo, hi) == (2.0, 4.0) and t.tolist() == [[0.0, 1.0]]


def test_world_to_pixel_top_left():
    np.testing.assert_allclose(world_to_pixel(-4.0, 2.4, SPEC, 4), (0.0, 0.0), atol=1e-12)
    np.testing.assert_allclose(world_to_pixel(4.0, -2.4, SPEC, 4), (24.0, 40.0), atol=1e-12)


def test_compose_and_files_are_deterministic(tmp_path):
    risk = np.random.default_rng(0).random(SPEC.shape)
    occ = np.zeros(SPEC.shape)
    occ[2, 3] = 1
    path = np.array([[-3.0, 0.0], [0.0, 0.0], [3.0, 1.0]])
    img = compose(risk, SPEC, occ, planned=[path], truth=[path + [0, -1]])
    write_ppm(tmp_path / "a.ppm", img)
    write_ppm(tmp_path / "b.ppm", compose(risk, SPEC, occ, planned=[path], truth=[path + [0, -1]]))
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
    assert (img == [0, 200, 255]).all(axis=2).any()
    svg = svg_document(risk, SPEC, occ, planned=[path])
    assert svg == svg_document(risk, SPEC, occ, planned=[path])
    assert "<desc>" in svg and "polyline" in svg
