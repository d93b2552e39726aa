"""Training losses and gradients through the planner.

The planner's solution ``x = [z; lam]`` solves ``K x = r``.  For a loss ``L(z)``
the adjoint ``w = K^{-1} [dL/dz; 0]`` (``K`` is symmetric) gives
``dL/dtheta = w' (dr/dtheta - dK/dtheta x)``.  ``K`` holds ``2 Qt`` and ``r``
holds ``Gt = -[G; H]``, so ``dL/dQt_ij = -2 w_i z_j`` and ``dL/dG_i = -w_i``.
These are pulled back through :func:`~riskplan.planner.assemble_weights_vjp`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import CONTROL_DIM, STATE_DIM
from .errors import ConfigError, DivergenceError, ShapeError
from .grid import COST_PARAMS, FlowField, OccupancyGrid, VehicleRecord
from .planner import (
    V_MAX,
    CostDecoder,
    PlannedTrajectory,
    assemble_weights_vjp,
    build_system,
    ego_to_world,
    enforce_speed_constraint,
    solve_kkt,
    solve_linear,
)

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
DEFAULT_COLLISION_THRESHOLD = 4.0


@dataclass(frozen=True)
class LossConfig:
    w_l: float = 0.5
    w_h: float = 2.0
    smooth_l1_beta: float = 1.0
    collision_weight: float = 0.0
    collision_threshold: float = DEFAULT_COLLISION_THRESHOLD
    dice_smoothing: float = 1.0

    def __post_init__(self):
        if not (self.w_l > 0 and self.w_h > 0):
            raise ConfigError("flow loss weights must be positive")
        if self.collision_weight < 0:
            raise ConfigError("collision_weight must be non-negative")
        if self.smooth_l1_beta <= 0:
            raise ConfigError("smooth_l1_beta must be positive")


def _xy(traj) -> np.ndarray:
    if isinstance(traj, PlannedTrajectory):
        return traj.future[:, :2]
    return np.asarray(traj, dtype=np.float64)[:, :2]


# --- losses -------------------------------------------------------------------------

def mse_planning_loss(planned, demo) -> float:
    """Mean over steps of the squared position error."""
    p, d = _xy(planned), _xy(demo)
    if p.shape != d.shape:
        raise ShapeError(f"trajectory lengths differ: {p.shape[0]} vs {d.shape[0]}")
    return float(np.mean(np.sum((p - d) ** 2, axis=1)))


def collision_penalty(planned, others: Sequence, cfg: LossConfig = LossConfig()) -> float:
    """Sum over steps and other vehicles of ``max(0, threshold - distance)^2`` (unweighted)."""
    p = _xy(planned)
    total = 0.0
    for o in others:
        op = _xy(o)
        if op.shape != p.shape:
            raise ShapeError("trajectories must share a time base")
        gap = np.maximum(0.0, cfg.collision_threshold - np.linalg.norm(p - op, axis=1))
        total += float(np.sum(gap ** 2))
    return total


def _mse_grad(p: np.ndarray, d: np.ndarray) -> np.ndarray:
    return 2.0 * (p - d) / p.shape[0]


def _collision_grad(p: np.ndarray, others: Sequence, threshold: float) -> np.ndarray:
    g = np.zeros_like(p)
    for o in others:
        diff = p - _xy(o)
        dist = np.linalg.norm(diff, axis=1)
        gap = np.maximum(0.0, threshold - dist)
        safe = np.where(dist > 0, dist, 1.0)
        g += (-2.0 * gap / safe)[:, None] * np.where(dist[:, None] > 0, diff, 0.0)
    return g


def occupancy_loss(pred, gt, cfg: LossConfig = LossConfig()) -> float:
    """Mean binary cross-entropy plus Dice loss; predictions clamped to ``[1e-7, 1 - 1e-7]``."""
    p = pred.values if isinstance(pred, OccupancyGrid) else np.asarray(pred, dtype=np.float64)
    g = gt.values if isinstance(gt, OccupancyGrid) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != gt shape {g.shape}")
    p = np.clip(p, 1e-7, 1 - 1e-7)
    bce = float(np.mean(-(g * np.log(p) + (1 - g) * np.log(1 - p))))
    sm = cfg.dice_smoothing
    dice = 1.0 - (2.0 * float(np.sum(p * g)) + sm) / (float(np.sum(p)) + float(np.sum(g)) + sm)
    return bce + dice


def flow_loss(pred, gt, cfg: LossConfig = LossConfig()) -> float:
    """Smooth-L1 weighted by ``w_l`` where the target is exactly 0 and ``w_h`` elsewhere; mean."""
    p = pred.values if isinstance(pred, FlowField) else np.asarray(pred, dtype=np.float64)
    g = gt.values if isinstance(gt, FlowField) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != gt shape {g.shape}")
    diff = np.abs(p - g)
    beta = cfg.smooth_l1_beta
    elem = np.where(diff < beta, 0.5 * diff ** 2 / beta, diff - 0.5 * beta)
    weight = np.where(g == 0.0, cfg.w_l, cfg.w_h)
    return float(np.mean(weight * elem))


# --- gradients through the planner ------------------------------------------------------

@dataclass
class PlanLoss:
    loss: float
    grad: np.ndarray  # (T, 14) w.r.t. the raw cost slice
    trajectory: PlannedTrajectory
    on_boundary: bool


def plan_loss_and_grad(vehicle: VehicleRecord, cost_slice, demo, *, dt: float = 0.5,
                       others: Sequence = (), cfg: LossConfig = LossConfig(), v_max: float = V_MAX,
                       scale: float = 1.0) -> PlanLoss:
    """Planning loss (MSE plus weighted collision penalty) and its gradient w.r.t. the cost slice.

    If speed pins are active the gradient is that of the pinned equality
    system and ``on_boundary`` is set.
    """
    rows = np.asarray(cost_slice, dtype=np.float64)
    t = rows.shape[0]
    sys = build_system(vehicle, rows, dt)
    sol = enforce_speed_constraint(solve_kkt(sys), sys, v_max)
    traj = PlannedTrajectory(ego_to_world(sol.states, vehicle), vehicle.id, sol)
    p = traj.future[:, :2]
    d = _xy(demo)
    loss = mse_planning_loss(p, d)
    g_pos = _mse_grad(p, d)
    if cfg.collision_weight > 0 and len(others):
        loss += cfg.collision_weight * collision_penalty(p, others, cfg)
        g_pos = g_pos + cfg.collision_weight * _collision_grad(p, others, cfg.collision_threshold)
    loss *= scale
    g_pos *= scale

    n = sys.num_primal
    ch, sh = math.cos(vehicle.heading), math.sin(vehicle.heading)
    g_z = np.zeros(n)
    for k in range(1, t):
        gx, gy = g_pos[k - 1]
        g_z[STATE_DIM * k + 0] = gx * ch + gy * sh
        g_z[STATE_DIM * k + 2] = -gx * sh + gy * ch

    kmat = sys.matrix(sol.pins)
    w = solve_linear(kmat, np.concatenate([g_z, np.zeros(kmat.shape[0] - n)]))[:n]
    z = sol.primal
    nx = STATE_DIM * t
    grad = np.zeros((t, COST_PARAMS))
    for k in range(t):
        xs = slice(STATE_DIM * k, STATE_DIM * k + STATE_DIM)
        us = slice(nx + CONTROL_DIM * k, nx + CONTROL_DIM * k + CONTROL_DIM)
        g_q = -2.0 * w[xs] * z[xs]
        g_r = -2.0 * np.outer(w[us], z[us])
        grad[k] = assemble_weights_vjp(rows[k], g_q, g_r, -w[xs], -w[us])
    return PlanLoss(loss, grad, traj, bool(sol.pins))


def plan_loss(vehicle, cost_slice, demo, *, dt=0.5, others=(), cfg=LossConfig(), v_max=V_MAX) -> float:
    return plan_loss_and_grad(vehicle, cost_slice, demo, dt=dt, others=others, cfg=cfg, v_max=v_max).loss


@dataclass
class GradientReport:
    analytic: np.ndarray
    finite_difference: np.ndarray
    relative_error: np.ndarray
    on_boundary: bool

    @property
    def max_relative_error(self) -> float:
        return float(np.max(self.relative_error)) if self.relative_error.size else 0.0

    def breakdown(self) -> list[tuple[int, float, float, float]]:
        a, f, r = self.analytic.ravel(), self.finite_difference.ravel(), self.relative_error.ravel()
        return [(i, float(a[i]), float(f[i]), float(r[i])) for i in range(a.size)]


def relative_error(a, f) -> np.ndarray:
    a, f = np.asarray(a, dtype=float), np.asarray(f, dtype=float)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


_LD = np.longdouble


def _eliminate(k: np.ndarray, r: np.ndarray) -> np.ndarray:
    # Gaussian elimination with partial pivoting in extended precision.
    n = len(r)
    m = np.concatenate([k, r[:, None]], axis=1).astype(_LD)
    for c in range(n):
        p = c + int(np.argmax(np.abs(m[c:, c])))
        if p != c:
            m[[c, p]] = m[[p, c]]
        m[c + 1:] -= np.outer(m[c + 1:, c] / m[c, c], m[c])
    x = np.zeros(n, dtype=_LD)
    for i in range(n - 1, -1, -1):
        x[i] = (m[i, n] - m[i, i + 1:n] @ x[i + 1:]) / m[i, i]
    return x


def _solve_extended(k: np.ndarray, r: np.ndarray) -> np.ndarray:
    x = _eliminate(k, r)
    return x + _eliminate(k, r - k @ x)


def extended_plan_loss(vehicle: VehicleRecord, cost_slice, demo, *, dt: float = 0.5, others: Sequence = (),
                       cfg: LossConfig = LossConfig(), v_max: float = V_MAX) -> _LD:
    """The planning loss recomputed from scratch in extended precision.

    Shares no solver code with the float64 path; used as the finite-difference
    side of :func:`grad_through_planner` so that difference quotients of
    structurally constant components are not swamped by float64 round-off.
    """
    rows = np.asarray(cost_slice, dtype=_LD)
    t = rows.shape[0]
    eps = _LD(1e-4)
    zero = _LD(0)
    n, nx = 6 * t, 4 * t
    qt = np.zeros((n, n), dtype=_LD)
    g = np.zeros(n, dtype=_LD)
    for k in range(t):
        r = rows[k]
        for i in range(4):
            qt[4 * k + i, 4 * k + i] = np.logaddexp(zero, r[i]) + eps
        d0, d1 = np.logaddexp(zero, r[4]), np.logaddexp(zero, r[7])
        s = np.sqrt(d0 * d1)
        off = s * np.tanh((r[5] + r[6]) / 2 / s)
        u = nx + 2 * k
        qt[u:u + 2, u:u + 2] = [[d0 + eps, off], [off, d1 + eps]]
        g[4 * k:4 * k + 4] = r[8:12]
        g[u:u + 2] = r[12:14]
    dt_ld, v0 = _LD(dt), _LD(vehicle.speed)
    rows_eq, rhs_eq = [], []
    for i in range(4):
        e = np.zeros(n, dtype=_LD)
        e[i] = 1
        rows_eq.append(e)
        rhs_eq.append(_LD([0, vehicle.speed, 0, 0][i]))
    for k in range(t - 1):
        # X_{k+1} = A X_k + B U_k written out per state component
        for i, terms in enumerate([
            [(4 * k, 1), (4 * k + 1, dt_ld)],
            [(4 * k + 1, 1), (nx + 2 * k, dt_ld)],
            [(4 * k + 2, 1), (4 * k + 3, dt_ld * v0)],
            [(4 * k + 3, 1), (nx + 2 * k + 1, dt_ld * v0 / _LD(vehicle.l_fr))],
        ]):
            e = np.zeros(n, dtype=_LD)
            e[4 * (k + 1) + i] = 1
            for j, c in terms:
                e[j] -= c
            rows_eq.append(e)
            rhs_eq.append(zero)
    pins: dict[int, float] = {}
    while True:
        a = np.array(rows_eq + [np.eye(n, dtype=_LD)[4 * kk + 1] for kk in sorted(pins)], dtype=_LD)
        b = np.array(rhs_eq + [_LD(pins[kk]) for kk in sorted(pins)], dtype=_LD)
        m = a.shape[0]
        kk_mat = np.zeros((n + m, n + m), dtype=_LD)
        kk_mat[:n, :n] = 2 * qt
        kk_mat[:n, n:] = a.T
        kk_mat[n:, :n] = a
        z = _solve_extended(kk_mat, np.concatenate([-g, b]))[:n]
        v = z[1:nx:4]
        excess = np.abs(v) - _LD(v_max)
        excess[list(pins)] = -np.inf
        worst = int(np.argmax(excess))
        if math.isinf(v_max) or excess[worst] <= 1e-9 or worst == 0:
            break
        pins[worst] = math.copysign(v_max, float(v[worst]))
    ch, sh = np.cos(_LD(vehicle.heading)), np.sin(_LD(vehicle.heading))
    s_k, l_k = z[4:nx:4], z[6:nx:4]
    p = np.stack([_LD(vehicle.x) + s_k * ch - l_k * sh, _LD(vehicle.y) + s_k * sh + l_k * ch], axis=1)
    d = np.asarray(_xy(demo), dtype=_LD)
    loss = np.mean(np.sum((p - d) ** 2, axis=1))
    if cfg.collision_weight > 0:
        for o in others:
            dist = np.sqrt(np.sum((p - np.asarray(_xy(o), dtype=_LD)) ** 2, axis=1))
            gap = np.maximum(zero, _LD(cfg.collision_threshold) - dist)
            loss += _LD(cfg.collision_weight) * np.sum(gap ** 2)
    return loss


def grad_through_planner(cost_slice, vehicle: VehicleRecord, demo, *, dt: float = 0.5, others: Sequence = (),
                         cfg: LossConfig = LossConfig(), v_max: float = V_MAX,
                         fd_step: float = 1e-5) -> GradientReport:
    """Adjoint gradient of the planning loss next to a central-difference estimate.

    The difference quotients use :func:`extended_plan_loss`.
    """
    rows = np.asarray(cost_slice, dtype=np.float64)
    res = plan_loss_and_grad(vehicle, rows, demo, dt=dt, others=others, cfg=cfg, v_max=v_max)
    base = rows.astype(_LD)
    fd = np.zeros_like(rows)
    h = _LD(fd_step)
    for idx in np.ndindex(rows.shape):
        up, dn = base.copy(), base.copy()
        up[idx] += h
        dn[idx] -= h
        diff = (extended_plan_loss(vehicle, up, demo, dt=dt, others=others, cfg=cfg, v_max=v_max)
                - extended_plan_loss(vehicle, dn, demo, dt=dt, others=others, cfg=cfg, v_max=v_max))
        fd[idx] = float(diff / (2 * h))
    return GradientReport(res.grad, fd, relative_error(res.grad, fd), res.on_boundary)


# --- fitting from demonstrations ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DemoSample:
    """One supervised vehicle: its risk feature, demonstration and the other vehicles' demos."""

    vehicle: VehicleRecord
    feature: np.ndarray
    demo: np.ndarray  # (T-1, 4)
    others: tuple = ()
    dt: float = 0.5
    scenario_index: int = 0
    is_ego: bool = False


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-2
    epochs: int = 200
    decay: float = 0.0  # lr_e = lr / (1 + decay * e)
    seed: int = 0
    v_max: float = V_MAX

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    grad_norm: float


@dataclass
class FitResult:
    decoder: CostDecoder
    history: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.history]


def batch_loss_and_grad(decoder: CostDecoder, batch: Sequence[DemoSample], cfg: LossConfig = LossConfig(),
                        v_max: float = V_MAX):
    """Mean loss over the batch and its gradient w.r.t. the flattened decoder parameters."""
    gw = np.zeros_like(decoder.weight)
    gb = np.zeros_like(decoder.bias)
    total = 0.0
    for s in batch:
        rows = (decoder.weight @ s.feature + decoder.bias).reshape(decoder.horizon, COST_PARAMS)
        res = plan_loss_and_grad(s.vehicle, rows, s.demo, dt=s.dt, others=s.others, cfg=cfg, v_max=v_max)
        g = res.grad.ravel()
        total += res.loss
        gb += g
        gw += np.outer(g, s.feature)
    n = len(batch)
    return total / n, np.concatenate([gw.ravel(), gb]) / n


def fit_cost_parameters(batch: Sequence[DemoSample], init: CostDecoder, opt: OptimizerConfig = OptimizerConfig(),
                        cfg: LossConfig = LossConfig()) -> FitResult:
    """Full-batch gradient descent on the decoder parameters.

    Samples are reduced in the given order, so runs are bitwise reproducible.
    Each history record holds the loss and gradient norm before that epoch's update.
    """
    if len(batch) < 1:
        raise ConfigError("need at least one demonstration")
    theta = init.flat()
    decoder = init
    history = []
    for epoch in range(opt.epochs):
        loss, grad = batch_loss_and_grad(decoder, batch, cfg, opt.v_max)
        if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergenceError(epoch, loss, epoch - 1)
        gnorm = float(np.linalg.norm(grad))
        history.append(EpochRecord(epoch, loss, gnorm))
        log.debug("epoch %d loss %.6g grad %.3g", epoch, loss, gnorm)
        lr = opt.learning_rate / (1.0 + opt.decay * epoch)
        theta = theta - lr * grad
        decoder = decoder.with_flat(theta)
    return FitResult(decoder, history)


def perturb_decoder(decoder: CostDecoder, scale: float, seed: int, weight_scale: float | None = None) -> CostDecoder:
    rng = np.random.default_rng(seed)
    ws = scale if weight_scale is None else weight_scale
    return CostDecoder(decoder.weight + rng.normal(0, ws, decoder.weight.shape),
                       decoder.bias + rng.normal(0, scale, decoder.bias.shape))
