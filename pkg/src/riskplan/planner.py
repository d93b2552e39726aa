"""Learnable-cost MPC planner solved through one KKT system.

Decision vector ``z = [X_0..X_{T-1}, U_0..U_{T-1}]`` (``6T``) with multipliers
``lam`` (``4T``) for the constraints ``X_0 = x0`` and
``X_{k+1} - A_k X_k - B_k U_k = 0``.  The cost is

    J = sum_k X_k' Q_k X_k + U_k' R_k U_k + G_k X_k + H_k U_k

taken literally (no 1/2).  With ``Gt = -[G; H]`` stationarity reads
``2 Qt z - Gt + At' lam = 0``; the factor 2 lives in :meth:`KKTSystem.matrix`.
The solved system is

    [[2 Qt, At'], [At, 0]] [z; lam] = [Gt; Bt].
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .dynamics import CONTROL_DIM, STATE_DIM, LinearizedDynamics, linearization_speeds, wrap_angle
from .errors import InfeasibleConstraint, NumericError, ShapeError, SingularKKT
from .grid import COST_PARAMS, CostMap, VehicleRecord

EPS_PD = 1e-4
MPH = 0.44704
V_MAX = 80 * MPH
STEP_VARS = STATE_DIM + CONTROL_DIM
PIVOT_TOL = 1e-12


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


# --- cost decoding ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CostDecoder:
    """Single affine layer from risk features ``C`` to ``T * 14`` cost parameters."""

    weight: np.ndarray  # (T*14, C)
    bias: np.ndarray  # (T*14,)

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).ravel()
        if w.ndim != 2 or w.shape[0] != b.shape[0] or w.shape[0] % COST_PARAMS:
            raise ShapeError(f"decoder weight {w.shape} / bias {b.shape} inconsistent")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def horizon(self) -> int:
        return self.weight.shape[0] // COST_PARAMS

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def from_rows(cls, rows, in_dim: int) -> "CostDecoder":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != COST_PARAMS:
            raise ShapeError(f"cost rows must be T x {COST_PARAMS}")
        return cls(np.zeros((rows.size, in_dim)), rows.ravel())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias])

    def with_flat(self, theta: np.ndarray) -> "CostDecoder":
        n = self.weight.size
        return CostDecoder(theta[:n].reshape(self.weight.shape), theta[n:])

    def tensors(self) -> dict[str, np.ndarray]:
        return {"decoder.weight": self.weight, "decoder.bias": self.bias}

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "CostDecoder":
        return cls(t["decoder.weight"], t["decoder.bias"])


def decode_cost_map(risk_features, decoder: CostDecoder) -> CostMap:
    f = np.atleast_2d(np.asarray(risk_features, dtype=np.float64))
    if f.size and not np.all(np.isfinite(f)):
        raise NumericError("risk features contain non-finite values")
    if f.shape[1] != decoder.in_dim:
        raise ShapeError(f"risk features have {f.shape[1]} channels, decoder expects {decoder.in_dim}")
    out = f @ decoder.weight.T + decoder.bias
    return CostMap(out.reshape(f.shape[0], decoder.horizon, COST_PARAMS))


# --- weight regularization ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StepWeights:
    Q: np.ndarray
    R: np.ndarray
    G: np.ndarray
    H: np.ndarray


def _check_row(row) -> np.ndarray:
    r = np.asarray(row, dtype=np.float64).ravel()
    if r.shape != (COST_PARAMS,):
        raise ShapeError(f"cost row must have {COST_PARAMS} entries, got {np.shape(row)}")
    if not np.all(np.isfinite(r)):
        raise NumericError("cost row contains non-finite values")
    return r


def _r_parts(r: np.ndarray):
    d0, d1 = softplus(r[4]), softplus(r[7])
    m = 0.5 * (r[5] + r[6])
    s = max(math.sqrt(d0 * d1), 1e-300)
    t = math.tanh(m / s)
    return d0, d1, m, s, t


def assemble_weights(cost_row) -> StepWeights:
    """Map 14 raw parameters to positive-definite step weights.

    ``Q = diag(softplus(q)) + eps``.  ``R`` keeps softplus diagonals and the
    symmetrized off-diagonal ``m = (r01 + r10) / 2`` squashed to
    ``sqrt(d0 d1) * tanh(m / sqrt(d0 d1))`` so the matrix stays PSD, then
    ``eps * I`` is added.
    """
    r = _check_row(cost_row)
    q = softplus(r[0:4]) + EPS_PD
    d0, d1, _, s, t = _r_parts(r)
    off = s * t
    R = np.array([[d0 + EPS_PD, off], [off, d1 + EPS_PD]])
    return StepWeights(np.diag(q), R, r[8:12].copy(), r[12:14].copy())


def symmetric_part(cost_row) -> np.ndarray:
    """Raw ``R`` block before any positive map: ``(R + R') / 2``."""
    r = _check_row(cost_row)
    raw = r[4:8].reshape(2, 2)
    return 0.5 * (raw + raw.T)


def assemble_weights_vjp(cost_row, g_qdiag, g_R, g_G, g_H) -> np.ndarray:
    """Pull gradients w.r.t. ``(diag Q, R, G, H)`` back to the 14 raw parameters."""
    r = _check_row(cost_row)
    out = np.zeros(COST_PARAMS)
    out[0:4] = np.asarray(g_qdiag) * sigmoid(r[0:4])
    g_R = np.asarray(g_R, dtype=np.float64)
    d0, d1, m, s, t = _r_parts(r)
    g_off = g_R[0, 1] + g_R[1, 0]
    dt_ds = t - (m / s) * (1.0 - t * t)
    g_d0 = g_R[0, 0] + g_off * dt_ds * d1 / (2 * s)
    g_d1 = g_R[1, 1] + g_off * dt_ds * d0 / (2 * s)
    g_m = g_off * (1.0 - t * t)
    out[4] = g_d0 * sigmoid(r[4])
    out[7] = g_d1 * sigmoid(r[7])
    out[5] = out[6] = 0.5 * g_m
    out[8:12] = g_G
    out[12:14] = g_H
    return out


# --- KKT system -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KKTSystem:
    q_tilde: np.ndarray  # (6T, 6T) blockdiag(Q_0..Q_{T-1}, R_0..R_{T-1})
    a_tilde: np.ndarray  # (4T, 6T)
    g_tilde: np.ndarray  # (6T,) = -[G_0..G_{T-1}, H_0..H_{T-1}]
    b_tilde: np.ndarray  # (4T,) = [x0, 0]
    horizon: int

    @property
    def num_primal(self) -> int:
        return STEP_VARS * self.horizon

    def state_index(self, k: int, i: int) -> int:
        return STATE_DIM * k + i

    def control_index(self, k: int, j: int) -> int:
        return STATE_DIM * self.horizon + CONTROL_DIM * k + j

    def constraints(self, pins: Mapping[int, float] | None = None):
        """Equality rows and right-hand side, optionally with pinned speeds appended."""
        if not pins:
            return self.a_tilde, self.b_tilde
        rows = np.zeros((len(pins), self.num_primal))
        rhs = np.zeros(len(pins))
        for i, (k, val) in enumerate(sorted(pins.items())):
            rows[i, self.state_index(k, 1)] = 1.0
            rhs[i] = val
        return np.vstack([self.a_tilde, rows]), np.concatenate([self.b_tilde, rhs])

    def matrix(self, pins: Mapping[int, float] | None = None) -> np.ndarray:
        a, _ = self.constraints(pins)
        n, m = self.num_primal, a.shape[0]
        k = np.zeros((n + m, n + m))
        k[:n, :n] = 2.0 * self.q_tilde
        k[:n, n:] = a.T
        k[n:, :n] = a
        return k

    def rhs(self, pins: Mapping[int, float] | None = None) -> np.ndarray:
        _, b = self.constraints(pins)
        return np.concatenate([self.g_tilde, b])

    def objective(self, z: np.ndarray) -> float:
        return float(z @ self.q_tilde @ z - self.g_tilde @ z)


def assemble_kkt(weights: Sequence[StepWeights], dyn: LinearizedDynamics, x0) -> KKTSystem:
    t = len(weights)
    if t < 2:
        raise ShapeError(f"horizon must be at least 2, got {t}")
    if dyn.horizon != t:
        raise ShapeError(f"dynamics horizon {dyn.horizon} != number of step weights {t}")
    x0 = x0.as_array() if hasattr(x0, "as_array") else np.asarray(x0, dtype=np.float64)
    if x0.shape != (STATE_DIM,):
        raise ShapeError(f"x0 must have {STATE_DIM} entries")
    n = STEP_VARS * t
    nx = STATE_DIM * t
    q = np.zeros((n, n))
    g = np.zeros(n)
    for k, w in enumerate(weights):
        q[4 * k:4 * k + 4, 4 * k:4 * k + 4] = w.Q
        q[nx + 2 * k:nx + 2 * k + 2, nx + 2 * k:nx + 2 * k + 2] = w.R
        g[4 * k:4 * k + 4] = -w.G
        g[nx + 2 * k:nx + 2 * k + 2] = -w.H
    a = np.zeros((STATE_DIM * t, n))
    a[0:4, 0:4] = np.eye(4)
    for k in range(t - 1):
        r = 4 * (k + 1)
        a[r:r + 4, 4 * k:4 * k + 4] = -dyn.A[k]
        a[r:r + 4, 4 * (k + 1):4 * (k + 1) + 4] = np.eye(4)
        a[r:r + 4, nx + 2 * k:nx + 2 * k + 2] = -dyn.B[k]
    b = np.zeros(STATE_DIM * t)
    b[:4] = x0
    return KKTSystem(q, a, g, b, t)


@dataclass(frozen=True, eq=False)
class PlannerSolution:
    """``vector`` follows ``[states (4T), controls (2T), multipliers (4T)]``."""

    vector: np.ndarray
    kkt_residual: float
    min_pivot: float
    horizon: int
    pins: dict = field(default_factory=dict)
    pin_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def active_set(self) -> list[int]:
        return sorted(self.pins)

    @property
    def primal(self) -> np.ndarray:
        return self.vector[:STEP_VARS * self.horizon]

    @property
    def states(self) -> np.ndarray:
        return self.vector[:STATE_DIM * self.horizon].reshape(self.horizon, STATE_DIM)

    @property
    def controls(self) -> np.ndarray:
        t = self.horizon
        return self.vector[STATE_DIM * t:STEP_VARS * t].reshape(t, CONTROL_DIM)

    @property
    def multipliers(self) -> np.ndarray:
        return self.vector[STEP_VARS * self.horizon:]

    def full_dual(self) -> np.ndarray:
        return np.concatenate([self.multipliers, self.pin_multipliers])


def _factor(k: np.ndarray):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lu, piv = scipy.linalg.lu_factor(k, check_finite=False)
    pivots = np.abs(np.diag(lu))
    min_pivot = float(pivots.min())
    scale = max(1.0, float(np.abs(k).max()))
    if not np.isfinite(min_pivot) or min_pivot <= PIVOT_TOL * scale:
        raise SingularKKT(min_pivot)
    return (lu, piv), min_pivot


def solve_linear(k: np.ndarray, rhs: np.ndarray, factor=None):
    """Dense LU solve with one step of iterative refinement."""
    if factor is None:
        factor, _ = _factor(k)
    x = scipy.linalg.lu_solve(factor, rhs, check_finite=False)
    x = x + scipy.linalg.lu_solve(factor, rhs - k @ x, check_finite=False)
    return x


def solve_kkt(sys: KKTSystem, pins: Mapping[int, float] | None = None) -> PlannerSolution:
    pins = dict(pins or {})
    k = sys.matrix(pins)
    rhs = sys.rhs(pins)
    factor, min_pivot = _factor(k)
    x = solve_linear(k, rhs, factor)
    if not np.all(np.isfinite(x)):
        raise NumericError("KKT solve produced non-finite values")
    residual = float(np.max(np.abs(k @ x - rhs)))
    n_base = STEP_VARS * sys.horizon + STATE_DIM * sys.horizon
    return PlannerSolution(x[:n_base].copy(), residual, min_pivot, sys.horizon, pins, x[n_base:].copy())


def enforce_speed_constraint(sol: PlannerSolution, sys: KKTSystem, v_max: float = V_MAX,
                             tol: float = 1e-9) -> PlannerSolution:
    """Active-set pinning of ``|v_k| <= v_max``.

    While some speed violates the bound, the worst one is pinned to
    ``sign(v_k) * v_max`` by an extra equality row and the system is re-solved.
    """
    if math.isnan(v_max) or v_max < 0:
        raise NumericError(f"v_max must be non-negative, got {v_max}")
    if math.isinf(v_max):
        return sol
    pins = dict(sol.pins)
    current = sol
    for _ in range(sys.horizon + 1):
        v = current.states[:, 1]
        excess = np.abs(v) - v_max
        excess[list(pins)] = -np.inf
        k = int(np.argmax(excess))
        if excess[k] <= tol:
            return current
        if k == 0:
            raise InfeasibleConstraint(f"initial speed {v[0]:.4f} m/s exceeds v_max {v_max:.4f} m/s")
        pins[k] = math.copysign(v_max, v[k])
        try:
            current = solve_kkt(sys, pins)
        except SingularKKT as exc:
            raise InfeasibleConstraint(f"pinned system is singular at step {k}") from exc
    raise InfeasibleConstraint("speed constraint did not converge")


# --- trajectory planning ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PlannedTrajectory:
    """World-frame poses ``(x, y, heading, speed)`` over ``T`` steps; step 0 is now."""

    poses: np.ndarray
    vehicle_id: int
    solution: PlannerSolution | None = None

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :2]

    @property
    def future(self) -> np.ndarray:
        return self.poses[1:]

    def __len__(self) -> int:
        return self.poses.shape[0]


def ego_to_world(states: np.ndarray, vehicle: VehicleRecord) -> np.ndarray:
    s, v, l, phi = states.T
    ch, sh = math.cos(vehicle.heading), math.sin(vehicle.heading)
    x = vehicle.x + s * ch - l * sh
    y = vehicle.y + s * sh + l * ch
    return np.stack([x, y, wrap_angle(vehicle.heading + phi), v], axis=1)


def build_system(vehicle: VehicleRecord, cost_slice, dt: float, previous_states=None) -> KKTSystem:
    rows = np.asarray(cost_slice, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != COST_PARAMS:
        raise ShapeError(f"cost slice must be T x {COST_PARAMS}, got {rows.shape}")
    t = rows.shape[0]
    speeds = linearization_speeds(vehicle.speed, t, previous_states)
    dyn = LinearizedDynamics.build(speeds, dt, vehicle.l_fr)
    weights = [assemble_weights(r) for r in rows]
    return assemble_kkt(weights, dyn, np.array([0.0, vehicle.speed, 0.0, 0.0]))


def plan(vehicle: VehicleRecord, cost_slice, scenario=None, *, dt: float | None = None,
         v_max: float = V_MAX, relinearize: bool = False) -> PlannedTrajectory:
    """Plan one vehicle from its ``T x 14`` cost slice.

    The ego frame is the vehicle's current pose, so ``x0 = (0, speed, 0, 0)``.
    ``relinearize`` performs one extra solve linearized around the first
    solution's speed profile.
    """
    if dt is None:
        dt = scenario.dt if scenario is not None else 0.5
    sys = build_system(vehicle, cost_slice, dt)
    sol = enforce_speed_constraint(solve_kkt(sys), sys, v_max)
    if relinearize:
        sys = build_system(vehicle, cost_slice, dt, previous_states=sol.states)
        sol = enforce_speed_constraint(solve_kkt(sys), sys, v_max)
    return PlannedTrajectory(ego_to_world(sol.states, vehicle), vehicle.id, sol)
