"""Scaled dot-product attention primitives.

Three read-outs are built on the same kernel:

* :func:`temporal_self_attention` fuses a per-cell history into one feature
  (query at the most recent step, keys/values over all steps).
* :func:`agent_cross_fusion` fuses per-agent features with a bilinear score
  ``q_i . W_ij . k_j`` normalized over agents ``j``.
* :func:`risk_cross_attention` lets each vehicle's cell query the whole grid;
  the head-averaged attention weights are the risk map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, NumericError, OutOfGrid, ShapeError
from .grid import FeatureGrid, RiskMap, flatten_features


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _finite(name: str, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite values")
    return a


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Multi-head projections.

    ``w_q, w_k, w_v`` have shape ``(num_heads, C // num_heads, C)`` and
    ``w_o`` is ``C x C``; a head's query is ``w_q[h] @ x``.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        arrs = {}
        for name in ("w_q", "w_k", "w_v", "w_o"):
            a = _finite(name, getattr(self, name)).copy()
            a.setflags(write=False)
            arrs[name] = a
            object.__setattr__(self, name, a)
        h, d, c = arrs["w_q"].shape if arrs["w_q"].ndim == 3 else (0, 0, 0)
        if h < 1 or c % h or d != c // h:
            raise ShapeError(f"w_q must be (heads, C/heads, C), got {arrs['w_q'].shape}")
        for name in ("w_k", "w_v"):
            if arrs[name].shape != (h, d, c):
                raise ShapeError(f"{name} shape {arrs[name].shape} != {(h, d, c)}")
        if arrs["w_o"].shape != (c, c):
            raise ShapeError(f"w_o shape {arrs['w_o'].shape} != {(c, c)}")

    @property
    def num_heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[2]

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def random(cls, model_dim: int, num_heads: int, seed: int = 0, scale: float | None = None) -> "AttentionParams":
        if num_heads < 1 or model_dim % num_heads:
            raise ConfigError(f"model_dim {model_dim} not divisible by num_heads {num_heads}")
        rng = np.random.default_rng(seed)
        d = model_dim // num_heads
        s = 1.0 / math.sqrt(model_dim) if scale is None else scale
        shape = (num_heads, d, model_dim)
        return cls(rng.normal(0, s, shape), rng.normal(0, s, shape), rng.normal(0, s, shape),
                   rng.normal(0, s, (model_dim, model_dim)))

    @classmethod
    def single_head(cls, w_q, w_k, w_v, w_o=None) -> "AttentionParams":
        w_q = np.asarray(w_q, dtype=float)
        c = w_q.shape[1]
        return cls(w_q[None], np.asarray(w_k, dtype=float)[None], np.asarray(w_v, dtype=float)[None],
                   np.eye(c) if w_o is None else w_o)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"attn.w_q": self.w_q, "attn.w_k": self.w_k, "attn.w_v": self.w_v, "attn.w_o": self.w_o}

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "AttentionParams":
        return cls(t["attn.w_q"], t["attn.w_k"], t["attn.w_v"], t["attn.w_o"])


def multi_head_attention(queries, keys, values, params: AttentionParams, logit_bias=0.0):
    """Returns ``(outputs (Nq, C), weights (heads, Nq, Nk))``."""
    q_in = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    k_in = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    v_in = np.atleast_2d(np.asarray(values, dtype=np.float64))
    c = params.model_dim
    if q_in.shape[1] != c or k_in.shape[1] != c or v_in.shape[1] != c:
        raise ShapeError(f"attention inputs must have {c} channels")
    if k_in.shape[0] != v_in.shape[0]:
        raise ShapeError("keys and values must have the same length")
    q = np.einsum("nc,hdc->hnd", q_in, params.w_q)
    k = np.einsum("nc,hdc->hnd", k_in, params.w_k)
    v = np.einsum("nc,hdc->hnd", v_in, params.w_v)
    logits = np.einsum("hnd,hmd->hnm", q, k) / math.sqrt(params.head_dim) + logit_bias
    weights = softmax(logits, axis=-1)
    heads = np.einsum("hnm,hmd->nhd", weights, v).reshape(q_in.shape[0], c)
    return heads @ params.w_o.T, weights


# --- position / time embeddings -------------------------------------------------

def _sinusoid(values: np.ndarray, wavelengths: np.ndarray) -> np.ndarray:
    ang = 2.0 * np.pi * values[:, None] / wavelengths[None, :]
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1)


def position_embedding(points, dim: int, min_wavelength: float = 4.0, max_wavelength: float = 200.0,
                       projection: np.ndarray | None = None) -> np.ndarray:
    """Sinusoidal embedding of world ``(x, y)`` points, ``K x dim``.

    Each frequency contributes ``sin/cos`` of x then of y.  Without an explicit
    ``projection`` (``dim x 4F``) the interleaved code is truncated to ``dim``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    nf = max(1, math.ceil(dim / 4))
    wl = np.geomspace(min_wavelength, max_wavelength, nf) if nf > 1 else np.array([min_wavelength])
    ex = _sinusoid(pts[:, 0], wl)
    ey = _sinusoid(pts[:, 1], wl)
    code = np.concatenate([ex, ey], axis=-1).reshape(len(pts), 4 * nf)
    if projection is not None:
        projection = np.asarray(projection, dtype=np.float64)
        if projection.shape != (dim, 4 * nf):
            raise ShapeError(f"projection must be {(dim, 4 * nf)}, got {projection.shape}")
        return code @ projection.T
    return code[:, :dim]


def time_embedding(times, dim: int, min_period: float = 1.0, max_period: float = 20.0) -> np.ndarray:
    t = np.asarray(times, dtype=np.float64).ravel()
    nf = max(1, math.ceil(dim / 2))
    periods = np.geomspace(min_period, max_period, nf) if nf > 1 else np.array([min_period])
    return _sinusoid(t, periods).reshape(len(t), 2 * nf)[:, :dim]


# --- temporal fusion --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AffineParams:
    weight: np.ndarray
    bias: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ np.asarray(self.weight).T + self.bias

    @classmethod
    def identity(cls, dim: int) -> "AffineParams":
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def random(cls, dim_out: int, dim_in: int, seed: int = 0) -> "AffineParams":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, 1 / math.sqrt(dim_in), (dim_out, dim_in)), np.zeros(dim_out))


def temporal_self_attention(history, time_embeddings, params: AttentionParams,
                            mlp: AffineParams | None = None):
    """Fuse ``T_his`` steps per cell into one feature.

    ``history`` is ``T_his x C`` (one cell) or ``T_his x K x C``.  Steps are
    pre-transformed with ``relu(mlp(F + P))`` and the most recent step queries
    all steps.  Returns ``(fused (K, C) or (C,), weights (heads, K, T_his))``.
    """
    hist = _finite("history", history)
    single = hist.ndim == 2
    if single:
        hist = hist[:, None, :]
    if hist.ndim != 3 or hist.shape[0] < 1:
        raise ShapeError(f"history must be T_his x [K x] C, got {np.shape(history)}")
    emb = np.asarray(time_embeddings, dtype=np.float64)
    if emb.shape != (hist.shape[0], hist.shape[2]):
        raise ShapeError(f"time embeddings {emb.shape} do not match history {(hist.shape[0], hist.shape[2])}")
    if hist.shape[2] != params.model_dim:
        raise ShapeError(f"history has {hist.shape[2]} channels, params expect {params.model_dim}")
    mlp = mlp or AffineParams.identity(params.model_dim)
    pre = np.maximum(mlp(hist + emb[:, None, :]), 0.0)  # T, K, C
    q = np.einsum("kc,hdc->hkd", pre[-1], params.w_q)
    k = np.einsum("tkc,hdc->htkd", pre, params.w_k)
    v = np.einsum("tkc,hdc->htkd", pre, params.w_v)
    logits = np.einsum("hkd,htkd->hkt", q, k) / math.sqrt(params.head_dim)
    weights = softmax(logits, axis=-1)
    heads = np.einsum("hkt,htkd->khd", weights, v).reshape(hist.shape[1], params.model_dim)
    out = heads @ params.w_o.T
    return (out[0], weights[:, 0]) if single else (out, weights)


# --- multi-agent fusion ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FusionParams:
    query: AffineParams
    key: AffineParams
    value: AffineParams


def agent_cross_fusion(agent_features, pair_weights, params: FusionParams):
    """``F_i = sum_j softmax_j(q_i . W_ij . k_j) v_j``.

    ``pair_weights`` maps every ordered pair ``(i, j)`` (including ``i == j``) to a
    ``d x d`` matrix, or is an ``N x N x d x d`` array.
    Returns ``(fused (N, d_v), weights (N, N))``.
    """
    feats = np.atleast_2d(_finite("agent features", agent_features))
    n = feats.shape[0]
    if n < 1:
        raise ShapeError("at least one agent is required")
    q = params.query(feats)
    k = params.key(feats)
    v = params.value(feats)
    d = q.shape[1]
    if isinstance(pair_weights, Mapping):
        w = np.empty((n, n, d, d))
        for i in range(n):
            for j in range(n):
                if (i, j) not in pair_weights:
                    raise ConfigError(f"missing pair weight matrix W[{i},{j}]")
                w[i, j] = pair_weights[(i, j)]
    else:
        w = np.asarray(pair_weights, dtype=np.float64)
        if w.shape[:2] != (n, n):
            raise ConfigError(f"pair weights cover {w.shape[:2]} pairs, need {(n, n)}")
        if w.shape[2:] != (d, d):
            raise ShapeError(f"pair weight matrices must be {(d, d)}")
    logits = np.einsum("id,ijde,je->ij", q, w, k)
    weights = softmax(logits, axis=1)
    return weights @ v, weights


# --- risk map ---------------------------------------------------------------------

def risk_cross_attention(features: FeatureGrid, vehicle_cells: Sequence[Sequence[int]],
                         params: AttentionParams, pos_embed, logit_bias=0.0):
    """Each vehicle's occupied cell attends over every grid cell.

    Queries are cell feature plus position embedding, keys are all cell features
    plus their embeddings, values are the raw cell features.  Returns
    ``(risk_features (N, C), RiskMap)`` where the risk map averages the heads.
    """
    flat = flatten_features(features)
    h, w = features.values.shape[:2]
    pos = np.asarray(pos_embed, dtype=np.float64)
    if pos.shape != flat.shape:
        raise ShapeError(f"position embedding {pos.shape} does not match features {flat.shape}")
    if flat.shape[1] != params.model_dim:
        raise ShapeError(f"features have {flat.shape[1]} channels, params expect {params.model_dim}")
    _finite("position embedding", pos)
    idx = []
    for cell in vehicle_cells:
        r, c = int(cell[0]), int(cell[1])
        if not 0 <= r < h:
            raise OutOfGrid("row", r, 0, h - 1)
        if not 0 <= c < w:
            raise OutOfGrid("col", c, 0, w - 1)
        idx.append(r * w + c)
    if not idx:
        return np.zeros((0, flat.shape[1])), RiskMap(np.zeros((0, h * w)), (h, w))
    idx = np.array(idx)
    out, weights = multi_head_attention(flat[idx] + pos[idx], flat + pos, flat, params, logit_bias)
    risk = weights.mean(axis=0)
    risk = risk / risk.sum(axis=1, keepdims=True)
    return out, RiskMap(risk, (h, w))
