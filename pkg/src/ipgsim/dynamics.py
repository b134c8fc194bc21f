"""Unicycle agent model: discrete-time stepping, rollout, and analytic Jacobians.

State per agent is (px, py, theta, v); input is (a, w). Joint vectors stack
per-agent blocks. theta is deliberately NOT wrapped here: the solver needs a
smooth state, so wrapping happens only at observation encoding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

STATE_DIM = 4
CONTROL_DIM = 2

DEFAULT_TS = 0.1


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.atan2(math.sin(theta), math.cos(theta))
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class AgentState:
    px: float
    py: float
    theta: float
    v: float

    def __post_init__(self):
        vals = (self.px, self.py, self.theta, self.v)
        if not all(math.isfinite(x) for x in vals):
            raise ValueError(f"non-finite state {vals}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.theta, self.v])

    @staticmethod
    def from_array(x: np.ndarray) -> "AgentState":
        return AgentState(float(x[0]), float(x[1]), float(x[2]), float(x[3]))


@dataclass(frozen=True)
class ControlInput:
    a: float
    w: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.w)):
            raise ValueError(f"non-finite control ({self.a}, {self.w})")

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.w])


@dataclass(frozen=True)
class Limits:
    """State and control bounds. Controls are (a, w); the only bounded state is v."""

    a_min: float = -1.0
    a_max: float = 1.0
    w_min: float = -1.0
    w_max: float = 1.0
    v_min: float = -0.6
    v_max: float = 1.5

    def __post_init__(self):
        if not (self.a_min < self.a_max and self.w_min < self.w_max and self.v_min < self.v_max):
            raise ValueError("limits must satisfy lower < upper componentwise")

    @property
    def u_lower(self) -> np.ndarray:
        return np.array([self.a_min, self.w_min])

    @property
    def u_upper(self) -> np.ndarray:
        return np.array([self.a_max, self.w_max])

    def clamp_control(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.u_lower, self.u_upper)

    def scale_controls(self, factor: float) -> "Limits":
        """Scale the absolute values of the control bounds; state bounds untouched."""
        if not (0 < factor <= 1):
            raise ValueError("factor must be in (0, 1]")
        return Limits(
            a_min=self.a_min * factor,
            a_max=self.a_max * factor,
            w_min=self.w_min * factor,
            w_max=self.w_max * factor,
            v_min=self.v_min,
            v_max=self.v_max,
        )


def step(s, u, ts: float = DEFAULT_TS):
    """One explicit-Euler unicycle step.

    Accepts AgentState/ControlInput or raw arrays; returns matching type.
    """
    if ts <= 0:
        raise ValueError("ts must be positive")
    if isinstance(s, AgentState):
        ua, uw = (u.a, u.w) if isinstance(u, ControlInput) else (float(u[0]), float(u[1]))
        return AgentState(
            s.px + ts * s.v * math.cos(s.theta),
            s.py + ts * s.v * math.sin(s.theta),
            s.theta + ts * uw,
            s.v + ts * ua,
        )
    x = np.asarray(s, dtype=float)
    uu = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    return step_joint(x, uu, ts)


def step_joint(x: np.ndarray, u: np.ndarray, ts: float) -> np.ndarray:
    """Step a joint state of N stacked unicycle blocks."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    n = x.shape[0] // STATE_DIM
    out = x.copy()
    px, py, th, v = x[0::4], x[1::4], x[2::4], x[3::4]
    a, w = u[0::2], u[1::2]
    out[0::4] = px + ts * v * np.cos(th)
    out[1::4] = py + ts * v * np.sin(th)
    out[2::4] = th + ts * w
    out[3::4] = v + ts * a
    assert u.shape[0] == n * CONTROL_DIM, "inconsistent joint dimensions"
    return out


def linearize(s, u, ts: float = DEFAULT_TS) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians (A, B) of step() at (s, u) for a single agent."""
    if ts <= 0:
        raise ValueError("ts must be positive")
    x = s.as_array() if isinstance(s, AgentState) else np.asarray(s, dtype=float)
    th, v = x[2], x[3]
    A = np.array(
        [
            [1.0, 0.0, -ts * v * math.sin(th), ts * math.cos(th)],
            [0.0, 1.0, ts * v * math.cos(th), ts * math.sin(th)],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    B = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, ts], [ts, 0.0]])
    return A, B


def linearize_joint(x: np.ndarray, ts: float) -> tuple[np.ndarray, np.ndarray]:
    """Block-diagonal Jacobians for a joint state (controls don't couple agents)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    n_agents = x.shape[0] // STATE_DIM
    n, m = n_agents * STATE_DIM, n_agents * CONTROL_DIM
    A = np.eye(n)
    B = np.zeros((n, m))
    for i in range(n_agents):
        Ai, Bi = linearize(x[4 * i : 4 * i + 4], None, ts)
        A[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] = Ai
        B[4 * i : 4 * i + 4, 2 * i : 2 * i + 2] = Bi
    return A, B


def rollout(x0: np.ndarray, U: np.ndarray, ts: float = DEFAULT_TS) -> np.ndarray:
    """Roll a joint control sequence forward: returns (T+1, n) states, row 0 = x0."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U.reshape(1, -1)
    T = U.shape[0]
    X = np.empty((T + 1, x0.shape[0]))
    X[0] = x0
    for k in range(T):
        X[k + 1] = step_joint(X[k], U[k], ts)
    return X
