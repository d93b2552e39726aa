import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import softmax_rows
from riskplan.attention import (
    AffineParams,
    AttentionParams,
    FusionParams,
    agent_cross_fusion,
    multi_head_attention,
    position_embedding,
    risk_cross_attention,
    softmax,
    temporal_self_attention,
    time_embedding,
)
from riskplan.errors import ConfigError, NumericError, OutOfGrid, ShapeError
from riskplan.grid import FeatureGrid

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)

WQ = np.array([[1.0, 0.5], [-0.3, 2.0]])
WK = np.array([[0.7, -1.0], [0.2, 0.4]])
WV = np.array([[1.5, 0.0], [0.3, -0.6]])
SINGLE = AttentionParams.single_head(WQ, WK, WV)


def scalar_attention(q, keys, vals):
    """softmax(q.k / sqrt(d)) v evaluated with plain Python floats."""
    d = len(q)
    logits = [sum(a * b for a, b in zip(q, k)) / math.sqrt(d) for k in keys]
    m = max(logits)
    e = [math.exp(x - m) for x in logits]
    s = sum(e)
    w = [x / s for x in e]
    return [sum(w[j] * vals[j][c] for j in range(len(vals))) for c in range(len(vals[0]))], w


def matvec(m, x):
    return [sum(m[i][j] * x[j] for j in range(len(x))) for i in range(len(m))]


# --- temporal fusion ---------------------------------------------------------------

def test_single_timestep_gets_all_weight():
    hist = np.array([[0.4, -1.2]])
    out, w = temporal_self_attention(hist, np.zeros((1, 2)), SINGLE)
    assert w.shape == (1, 1) and w[0, 0] == 1.0
    pre = np.maximum(hist[0], 0)
    np.testing.assert_allclose(out, WV @ pre, atol=1e-15)


def test_identical_steps_give_uniform_weights():
    hist = np.tile([0.3, 0.9], (5, 1))
    _, w = temporal_self_attention(hist, np.zeros((5, 2)), SINGLE)
    np.testing.assert_allclose(w, np.full((1, 5), 0.2), atol=1e-15)


def test_two_step_history_matches_scalar_evaluation():
    hist = np.array([[0.5, 1.0], [1.5, 0.2]])
    emb = np.array([[0.1, 0.0], [0.0, 0.3]])
    mlp = AffineParams(np.array([[1.0, 0.2], [-0.1, 0.8]]), np.array([0.05, 0.1]))
    out, w = temporal_self_attention(hist, emb, SINGLE, mlp)
    pre = [[max(0.0, v) for v in
            [a + b for a, b in zip(matvec(mlp.weight, [h + e for h, e in zip(hist[t], emb[t])]), mlp.bias)]]
           for t in range(2)]
    expected, ew = scalar_attention(matvec(WQ, pre[1]), [matvec(WK, p) for p in pre], [matvec(WV, p) for p in pre])
    np.testing.assert_allclose(w[0], ew, atol=1e-14)
    np.testing.assert_allclose(out, expected, atol=1e-14)


def test_temporal_shape_errors():
    with pytest.raises(ShapeError):
        temporal_self_attention(np.zeros((3, 2)), np.zeros((2, 2)), SINGLE)
    with pytest.raises(ShapeError):
        temporal_self_attention(np.zeros((3, 4)), np.zeros((3, 4)), SINGLE)


def test_temporal_batch_matches_single_cells():
    rng = np.random.default_rng(3)
    params = AttentionParams.random(4, 2, seed=1)
    hist = rng.normal(size=(3, 5, 4))
    emb = time_embedding(np.arange(3) * 0.5, 4)
    out, w = temporal_self_attention(hist, emb, params)
    for k in range(5):
        o, wk = temporal_self_attention(hist[:, k], emb, params)
        np.testing.assert_allclose(out[k], o, atol=1e-14)
        np.testing.assert_allclose(w[:, k], wk, atol=1e-14)


# --- agent fusion ------------------------------------------------------------------

def _fusion(seed=0, dim=2):
    return FusionParams(AffineParams.random(dim, dim, seed), AffineParams.random(dim, dim, seed + 1),
                        AffineParams.random(dim, dim, seed + 2))


def test_single_agent_returns_its_value():
    p = _fusion()
    f = np.array([[0.7, -0.2]])
    out, w = agent_cross_fusion(f, {(0, 0): np.eye(2)}, p)
    assert w[0, 0] == 1.0
    np.testing.assert_allclose(out[0], p.value(f)[0])


def test_identical_agents_split_evenly():
    f = np.array([[0.7, -0.2], [0.7, -0.2]])
    pairs = {(i, j): np.eye(2) for i in range(2) for j in range(2)}
    _, w = agent_cross_fusion(f, pairs, _fusion())
    np.testing.assert_allclose(w, 0.5)


def test_three_agents_match_scalar_evaluation():
    rng = np.random.default_rng(9)
    f = rng.normal(size=(3, 2))
    pairs = {(i, j): rng.normal(size=(2, 2)) for i in range(3) for j in range(3)}
    p = _fusion(4)
    out, w = agent_cross_fusion(f, pairs, p)
    q = [matvec(p.query.weight, x) for x in f]
    q = [[a + b for a, b in zip(r, p.query.bias)] for r in q]
    k = [[a + b for a, b in zip(matvec(p.key.weight, x), p.key.bias)] for x in f]
    v = [[a + b for a, b in zip(matvec(p.value.weight, x), p.value.bias)] for x in f]
    for i in range(3):
        logits = [sum(q[i][a] * pairs[(i, j)][a][b] * k[j][b] for a in range(2) for b in range(2)) for j in range(3)]
        e = [math.exp(x - max(logits)) for x in logits]
        wi = [x / sum(e) for x in e]
        np.testing.assert_allclose(w[i], wi, atol=1e-14)
        np.testing.assert_allclose(out[i], [sum(wi[j] * v[j][c] for j in range(3)) for c in range(2)], atol=1e-14)


def test_missing_pair_is_config_error():
    f = np.zeros((2, 2))
    with pytest.raises(ConfigError):
        agent_cross_fusion(f, {(0, 0): np.eye(2), (0, 1): np.eye(2), (1, 1): np.eye(2)}, _fusion())
    with pytest.raises(ConfigError):
        agent_cross_fusion(f, np.zeros((1, 1, 2, 2)), _fusion())


# --- risk map ----------------------------------------------------------------------

def test_one_cell_grid_is_certain():
    params = AttentionParams.random(2, 1, seed=0)
    _, risk = risk_cross_attention(FeatureGrid(np.array([[[0.3, 0.1]]])), [(0, 0)], params, np.zeros((1, 2)))
    np.testing.assert_array_equal(risk.weights, [[1.0]])


def test_constant_inputs_give_uniform_rows():
    params = AttentionParams.random(4, 2, seed=5)
    feats = FeatureGrid(np.full((3, 5, 4), 0.7))
    _, risk = risk_cross_attention(feats, [(0, 0), (2, 4), (1, 3)], params, np.full((15, 4), 0.2))
    np.testing.assert_allclose(risk.weights, 1 / 15, atol=1e-15)


def test_two_by_two_matches_scalar_softmax():
    vals = np.array([[[0.2, 1.0], [-0.5, 0.3]], [[1.1, -0.7], [0.0, 0.4]]])
    pos = np.array([[0.1, 0.0], [0.0, 0.1], [-0.1, 0.2], [0.3, -0.2]])
    out, risk = risk_cross_attention(FeatureGrid(vals), [(1, 0)], SINGLE, pos)
    flat = vals.reshape(4, 2)
    q = matvec(WQ, flat[2] + pos[2])
    expected, w = scalar_attention(q, [matvec(WK, flat[j] + pos[j]) for j in range(4)],
                                   [matvec(WV, flat[j]) for j in range(4)])
    np.testing.assert_allclose(risk.weights[0], w, atol=1e-10)
    np.testing.assert_allclose(out[0], expected, atol=1e-10)
    assert risk.as_grid(0).shape == (2, 2)


def test_vehicle_outside_grid():
    params = AttentionParams.random(2, 1)
    with pytest.raises(OutOfGrid):
        risk_cross_attention(FeatureGrid(np.zeros((2, 2, 2))), [(2, 0)], params, np.zeros((4, 2)))


def test_non_finite_embedding():
    params = AttentionParams.random(2, 1)
    pos = np.zeros((4, 2))
    pos[1, 1] = np.inf
    with pytest.raises(NumericError):
        risk_cross_attention(FeatureGrid(np.zeros((2, 2, 2))), [(0, 0)], params, pos)


def test_no_vehicles_gives_empty_map():
    params = AttentionParams.random(2, 1)
    out, risk = risk_cross_attention(FeatureGrid(np.zeros((2, 2, 2))), [], params, np.zeros((4, 2)))
    assert out.shape == (0, 2) and risk.weights.shape == (0, 4)


@given(arrays(np.float64, (3, 4, 4), elements=finite), st.integers(0, 10_000))
def test_risk_rows_are_distributions(vals, seed):
    params = AttentionParams.random(4, 2, seed=seed, scale=1.5)
    pos = position_embedding(np.random.default_rng(seed).uniform(-5, 5, (12, 2)), 4)
    _, risk = risk_cross_attention(FeatureGrid(vals), [(0, 0), (2, 3), (1, 1)], params, pos)
    assert np.all(risk.weights >= 0)
    np.testing.assert_allclose(risk.weights.sum(axis=1), 1, atol=1e-6)


@given(st.permutations(range(4)), st.integers(0, 1000))
def test_risk_equivariant_under_vehicle_permutation(perm, seed):
    rng = np.random.default_rng(seed)
    feats = FeatureGrid(rng.normal(size=(3, 3, 4)))
    pos = rng.normal(size=(9, 4))
    cells = [tuple(rng.integers(0, 3, 2)) for _ in range(4)]
    params = AttentionParams.random(4, 2, seed=seed)
    out, risk = risk_cross_attention(feats, cells, params, pos)
    out_p, risk_p = risk_cross_attention(feats, [cells[i] for i in perm], params, pos)
    np.testing.assert_allclose(out_p, out[list(perm)], atol=1e-14)
    np.testing.assert_allclose(risk_p.weights, risk.weights[list(perm)], atol=1e-14)


@given(st.floats(-50, 50), st.integers(0, 1000))
def test_constant_logit_bias_has_no_effect(bias, seed):
    rng = np.random.default_rng(seed)
    params = AttentionParams.random(4, 2, seed=seed)
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(6, 4))
    out, w = multi_head_attention(x, y, y, params)
    out_b, w_b = multi_head_attention(x, y, y, params, logit_bias=bias)
    np.testing.assert_allclose(w_b, w, atol=1e-12)
    np.testing.assert_allclose(out_b, out, atol=1e-12)


@given(st.integers(0, 1000))
def test_one_head_matches_plain_attention(seed):
    rng = np.random.default_rng(seed)
    wq, wk, wv, wo = (rng.normal(size=(3, 3)) for _ in range(4))
    params = AttentionParams.single_head(wq, wk, wv, wo)
    assert params.num_heads == 1
    x = rng.normal(size=(2, 3))
    y = rng.normal(size=(5, 3))
    w = softmax_rows((x @ wq.T) @ (y @ wk.T).T / math.sqrt(3))
    out, weights = multi_head_attention(x, y, y, params)
    np.testing.assert_allclose(weights[0], w, atol=1e-13)
    np.testing.assert_allclose(out, (w @ (y @ wv.T)) @ wo.T, atol=1e-13)


def test_softmax_stable_for_large_logits():
    w = softmax(np.array([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(w, [[0.5, 0.5, 0.0]])


def test_params_validation_and_round_trip():
    with pytest.raises(ConfigError):
        AttentionParams.random(5, 2)
    with pytest.raises(ShapeError):
        AttentionParams(np.zeros((2, 2, 4)), np.zeros((2, 2, 4)), np.zeros((2, 2, 4)), np.zeros((3, 3)))
    with pytest.raises(NumericError):
        AttentionParams.single_head(np.full((2, 2), np.nan), np.eye(2), np.eye(2))
    p = AttentionParams.random(4, 2, seed=3)
    q = AttentionParams.from_tensors(p.tensors())
    np.testing.assert_array_equal(q.w_o, p.w_o)


def test_embeddings_are_deterministic():
    pts = np.array([[0.0, 0.0], [1.2, -3.4]])
    np.testing.assert_array_equal(position_embedding(pts, 8), position_embedding(pts, 8))
    assert position_embedding(pts, 8).shape == (2, 8)
    assert time_embedding([0.0, 0.5, 1.0], 6).shape == (3, 6)
    assert not np.allclose(position_embedding(pts, 8)[0], position_embedding(pts, 8)[1])
