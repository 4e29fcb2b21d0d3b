"""Multi-agent control-affine dynamics: xdot = drift(x) + sum_i g_i(x) u_i.

Three system families are provided:

- 1D single integrators (one position coordinate per agent, relative degree 1),
- planar double integrators (state [px, py, vx, vy] per agent, relative
  degree 2 for position-only barriers),
- the two-agent relative double integrator, whose "joint state" is the
  relative coordinate r = x2 - x1 with layout [r_lon, r_lat, vr_lon, vr_lat].

Systems are immutable; drift/actuation evaluators are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

DEFAULT_CONTROL_BOUND = 10.0

# Index layout of the two-agent relative state r = x2 - x1.
R_LON, R_LAT, R_VLON, R_VLAT = 0, 1, 2, 3


@dataclass(frozen=True)
class AgentSpec:
    """Per-agent dimensions and box control bounds."""

    state_dim: int
    control_dim: int
    control_lower: np.ndarray
    control_upper: np.ndarray

    def __post_init__(self):
        if self.state_dim <= 0 or self.control_dim <= 0:
            raise ValueError("agent dimensions must be positive")
        lo = np.broadcast_to(np.asarray(self.control_lower, dtype=float),
                             (self.control_dim,)).copy()
        hi = np.broadcast_to(np.asarray(self.control_upper, dtype=float),
                             (self.control_dim,)).copy()
        if np.any(lo > hi):
            raise ValueError("control_lower must be <= control_upper elementwise")
        object.__setattr__(self, "control_lower", lo)
        object.__setattr__(self, "control_upper", hi)


def agent_spec(state_dim, control_dim, bound=DEFAULT_CONTROL_BOUND):
    """Symmetric box bounds [-bound, bound] on every control channel."""
    return AgentSpec(state_dim, control_dim, -bound * np.ones(control_dim),
                     bound * np.ones(control_dim))


@dataclass(frozen=True)
class ControlAffineSystem:
    """A joint system xdot = drift(x) + sum_i actuation(x, i) @ u_i.

    ``agent_state_dim`` is set for systems whose joint state is the
    concatenation of identical per-agent blocks; it is None for reduced
    coordinates (the relative two-agent system). ``position_dim`` gives the
    number of leading position coordinates inside each block.
    """

    name: str
    agents: tuple
    state_dim: int
    relative_degree: int
    drift: Callable[[np.ndarray], np.ndarray]
    drift_jacobian: Callable[[np.ndarray], np.ndarray]
    actuation: Callable[[np.ndarray, int], np.ndarray]
    agent_state_dim: Optional[int] = None
    position_dim: int = 1

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def control_dims(self):
        return tuple(a.control_dim for a in self.agents)

    @property
    def control_dim_total(self) -> int:
        return sum(self.control_dims)

    def control_bounds(self):
        """Stacked (lower, upper) arrays over all agents' control channels."""
        lo = np.concatenate([a.control_lower for a in self.agents])
        hi = np.concatenate([a.control_upper for a in self.agents])
        return lo, hi

    def split_controls(self, u):
        u = np.asarray(u, dtype=float)
        out, k = [], 0
        for d in self.control_dims:
            out.append(u[k:k + d])
            k += d
        return out

    def xdot(self, x, u):
        """State derivative for stacked controls u (length control_dim_total)."""
        x = np.asarray(x, dtype=float)
        dx = self.drift(x).copy()
        for i, ui in enumerate(self.split_controls(u)):
            dx += self.actuation(x, i) @ ui
        return dx

    def agent_state(self, x, i):
        if self.agent_state_dim is None:
            raise ValueError(f"{self.name}: joint state has no per-agent blocks")
        d = self.agent_state_dim
        return np.asarray(x, dtype=float)[i * d:(i + 1) * d]

    def position(self, x, i):
        return self.agent_state(x, i)[:self.position_dim]

    def check_state(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise ValueError(
                f"{self.name}: expected state of shape ({self.state_dim},), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"{self.name}: non-finite state")
        return x


def make_single_integrator_1d(n_agents, control_bound=DEFAULT_CONTROL_BOUND):
    """N agents on a line, xdot_i = u_i."""
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    n = n_agents

    def drift(x):
        return np.zeros(n)

    def drift_jacobian(x):
        return np.zeros((n, n))

    def actuation(x, i):
        g = np.zeros((n, 1))
        g[i, 0] = 1.0
        return g

    return ControlAffineSystem(
        name="single_integrator_1d",
        agents=tuple(agent_spec(1, 1, control_bound) for _ in range(n)),
        state_dim=n,
        relative_degree=1,
        drift=drift,
        drift_jacobian=drift_jacobian,
        actuation=actuation,
        agent_state_dim=1,
        position_dim=1,
    )


def make_double_integrator_2d(n_agents, control_bound=DEFAULT_CONTROL_BOUND):
    """N planar agents, per-agent state [px, py, vx, vy], vdot = u."""
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    n = n_agents
    dim = 4 * n

    # Constant drift Jacobian: positions integrate velocities.
    jac = np.zeros((dim, dim))
    for i in range(n):
        jac[4 * i + 0, 4 * i + 2] = 1.0
        jac[4 * i + 1, 4 * i + 3] = 1.0

    def drift(x):
        return jac @ np.asarray(x, dtype=float)

    def drift_jacobian(x):
        return jac

    def actuation(x, i):
        g = np.zeros((dim, 2))
        g[4 * i + 2, 0] = 1.0
        g[4 * i + 3, 1] = 1.0
        return g

    return ControlAffineSystem(
        name="double_integrator_2d",
        agents=tuple(agent_spec(4, 2, control_bound) for _ in range(n)),
        state_dim=dim,
        relative_degree=2,
        drift=drift,
        drift_jacobian=drift_jacobian,
        actuation=actuation,
        agent_state_dim=4,
        position_dim=2,
    )


def make_relative_double_integrator(control_bound=DEFAULT_CONTROL_BOUND):
    """Two planar double integrators in relative coordinates r = x2 - x1.

    rdot = (vr_lon, vr_lat, u2 - u1), so g1 = -[0; I] and g2 = +[0; I].
    """
    jac = np.zeros((4, 4))
    jac[R_LON, R_VLON] = 1.0
    jac[R_LAT, R_VLAT] = 1.0

    def drift(r):
        return jac @ np.asarray(r, dtype=float)

    def drift_jacobian(r):
        return jac

    def actuation(r, i):
        g = np.zeros((4, 2))
        sign = -1.0 if i == 0 else 1.0
        g[R_VLON, 0] = sign
        g[R_VLAT, 1] = sign
        return g

    return ControlAffineSystem(
        name="relative_double_integrator",
        agents=(agent_spec(4, 2, control_bound), agent_spec(4, 2, control_bound)),
        state_dim=4,
        relative_degree=2,
        drift=drift,
        drift_jacobian=drift_jacobian,
        actuation=actuation,
        agent_state_dim=None,
        position_dim=2,
    )


def relative_state(x1, x2):
    """Relative coordinate r = x2 - x1 for per-agent states [lon, lat, vlon, vlat]."""
    return np.asarray(x2, dtype=float) - np.asarray(x1, dtype=float)


def euler_rollout(system, x0, policy, dt=0.1, steps=100):
    """Explicit-Euler closed-loop rollout.

    ``policy(k, x)`` returns the stacked control at step k. Returns
    (states, controls) with shapes (steps+1, state_dim) and
    (steps, control_dim_total).
    """
    x = system.check_state(x0).copy()
    states = np.empty((steps + 1, system.state_dim))
    controls = np.empty((steps, system.control_dim_total))
    states[0] = x
    for k in range(steps):
        u = np.asarray(policy(k, x), dtype=float)
        controls[k] = u
        x = x + dt * system.xdot(x, u)
        states[k + 1] = x
    return states, controls
