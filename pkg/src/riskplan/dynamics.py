"""Linearized kinematic bicycle model in the ego frame.

State ``(s, v, l, phi)``: longitudinal position, speed, lateral position, heading.
Control ``(a, delta)``: acceleration, front wheel angle.  One step is
``X[k+1] = A_k X[k] + B_k U[k]`` with ``A_k, B_k`` evaluated at a fixed
linearization speed ``v_k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import GeometryError, NumericError, ShapeError

STATE_DIM = 4
CONTROL_DIM = 2


@dataclass(frozen=True)
class PlanState:
    s: float
    v: float
    l: float
    phi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.v, self.l, self.phi], dtype=np.float64)

    @classmethod
    def from_array(cls, x) -> "PlanState":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (STATE_DIM,):
            raise ShapeError(f"state must have 4 entries, got {x.shape}")
        return cls(*map(float, x))


@dataclass(frozen=True)
class PlanControl:
    a: float
    delta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.delta], dtype=np.float64)


def wrap_angle(phi):
    """Wrap to ``(-pi, pi]``."""
    a = np.asarray(phi, dtype=np.float64)
    out = np.mod(a + np.pi, 2 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    out = np.where((a > -np.pi) & (a <= np.pi), a, out)  # in-range angles pass through exactly
    return float(out) if np.ndim(out) == 0 else out


def _check_dt(dt: float) -> None:
    if not (math.isfinite(dt) and dt > 0):
        raise NumericError(f"dt must be positive and finite, got {dt}")


def build_A(v_k: float, dt: float) -> np.ndarray:
    _check_dt(dt)
    if not math.isfinite(v_k):
        raise NumericError(f"linearization speed must be finite, got {v_k}")
    a = np.eye(STATE_DIM)
    a[0, 1] = dt
    a[2, 3] = dt * v_k
    return a


def build_B(v_k: float, dt: float, l_fr: float) -> np.ndarray:
    _check_dt(dt)
    if not (math.isfinite(l_fr) and l_fr > 0):
        raise GeometryError(f"axle distance l_fr must be positive, got {l_fr}")
    if not math.isfinite(v_k):
        raise NumericError(f"linearization speed must be finite, got {v_k}")
    b = np.zeros((STATE_DIM, CONTROL_DIM))
    b[1, 0] = dt
    b[3, 1] = dt * v_k / l_fr
    return b


@dataclass(frozen=True, eq=False)
class LinearizedDynamics:
    A: np.ndarray  # (T-1, 4, 4)
    B: np.ndarray  # (T-1, 4, 2)
    dt: float
    l_fr: float
    speeds: np.ndarray  # (T-1,)

    @property
    def horizon(self) -> int:
        return self.A.shape[0] + 1

    @classmethod
    def build(cls, speeds: Sequence[float], dt: float, l_fr: float) -> "LinearizedDynamics":
        speeds = np.asarray(speeds, dtype=np.float64).ravel()
        a = np.stack([build_A(v, dt) for v in speeds]) if len(speeds) else np.zeros((0, 4, 4))
        b = np.stack([build_B(v, dt, l_fr) for v in speeds]) if len(speeds) else np.zeros((0, 4, 2))
        return cls(a, b, float(dt), float(l_fr), speeds)

    @classmethod
    def constant_speed(cls, v0: float, horizon: int, dt: float, l_fr: float) -> "LinearizedDynamics":
        return cls.build(np.full(horizon - 1, float(v0)), dt, l_fr)


def linearization_speeds(v0: float, horizon: int, previous_states: np.ndarray | None = None) -> np.ndarray:
    """Speeds used inside ``A_k, B_k``.

    Default is the measured current speed at every step; passing the state
    sequence of a previous solve re-linearizes around its speed profile.
    """
    if previous_states is None:
        return np.full(horizon - 1, float(v0))
    prev = np.asarray(previous_states, dtype=np.float64)
    return prev[: horizon - 1, 1].copy()


def rollout(x0, controls, l_fr: float, dt: float, speeds: Sequence[float] | None = None) -> np.ndarray:
    """Apply the linear recursion; returns ``T x 4`` states including ``x0``.

    ``speeds`` defaults to the initial speed held constant.  Headings are not
    wrapped here; wrapping would break linearity.
    """
    x = x0.as_array() if isinstance(x0, PlanState) else np.asarray(x0, dtype=np.float64)
    u = np.array([c.as_array() if isinstance(c, PlanControl) else c for c in controls], dtype=np.float64)
    u = u.reshape(-1, CONTROL_DIM)
    steps = u.shape[0]
    if speeds is None:
        speeds = np.full(steps, x[1])
    speeds = np.asarray(speeds, dtype=np.float64)
    if speeds.shape != (steps,):
        raise ShapeError(f"need {steps} linearization speeds, got {speeds.shape}")
    out = np.empty((steps + 1, STATE_DIM))
    out[0] = x
    for k in range(steps):
        out[k + 1] = build_A(speeds[k], dt) @ out[k] + build_B(speeds[k], dt, l_fr) @ u[k]
    return out
