"""Barrier functions and the linear-in-control safety inequality they induce.

A barrier b certifies safety through b(x) >= 0. For a control-affine system
the condition "b must not decay faster than a gain times its value" is affine
in the stacked control, so at a given state it collapses to

    sum_i a_i . u_i + c >= -eps

which is exactly the row consumed by the safety-filter QP. Relative-degree-2
systems (double integrators with position-only barriers) use the chained
condition  b'' + (k1 + k2) b' + k1 k2 b >= -eps  with two linear gains.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import ControlAffineSystem


@dataclass(frozen=True)
class Barrier:
    """Scalar safety measure with closed-form derivatives.

    ``hess`` is only required for relative-degree-2 constraint assembly.
    The safe set convention is value(x) >= 0.
    """

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "barrier"


@dataclass(frozen=True)
class ClassKappaLinear:
    """Linear class-K-infinity function alpha(s) = gain * s."""

    gain: float = 1.0

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("class-K gain must be positive")

    def __call__(self, s):
        return self.gain * s


@dataclass(frozen=True)
class CbfLinearConstraint:
    """Affine-in-control safety row: a . u_stacked + offset >= -eps."""

    a: np.ndarray
    offset: float
    agent_dims: tuple

    def per_agent(self):
        out, k = [], 0
        for d in self.agent_dims:
            out.append(self.a[k:k + d])
            k += d
        return out

    def value(self, u):
        """Left-hand side at a stacked control (without the slack)."""
        return float(self.a @ np.asarray(u, dtype=float)) + self.offset


def finite_difference_grad(f, x, step=1e-6):
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        g[j] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def finite_difference_jacobian(f, x, step=1e-6):
    """Central-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    jac = np.zeros((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        jac[:, j] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * step)
    return jac


def validate_barrier(barrier, states, rtol=1e-5, step=1e-6, require_hess=False):
    """Check closed-form derivatives against finite differences.

    Gate for user-supplied barriers: raises ValueError on mismatch. ``states``
    is an iterable of probe states.
    """
    for x in states:
        x = np.asarray(x, dtype=float)
        g = np.asarray(barrier.grad(x), dtype=float)
        g_fd = finite_difference_grad(barrier.value, x, step)
        scale = max(1.0, float(np.max(np.abs(g_fd))))
        if np.max(np.abs(g - g_fd)) > rtol * scale:
            raise ValueError(f"{barrier.name}: gradient disagrees with finite differences")
        if barrier.hess is not None:
            h = np.asarray(barrier.hess(x), dtype=float)
            h_fd = finite_difference_jacobian(barrier.grad, x, step)
            scale = max(1.0, float(np.max(np.abs(h_fd))))
            if np.max(np.abs(h - h_fd)) > rtol * scale:
                raise ValueError(f"{barrier.name}: Hessian disagrees with finite differences")
        elif require_hess:
            raise ValueError(f"{barrier.name}: Hessian evaluator is required")
    return barrier


def _pair_terms(system, margin):
    """Closed forms for b_ij = ||p_i - p_j||^2 - margin^2 over all pairs."""
    n = system.n_agents
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    pdim = system.position_dim
    dim = system.state_dim

    def pos_index(i):
        return slice(i * system.agent_state_dim, i * system.agent_state_dim + pdim)

    def values(x):
        return np.array([
            float(np.sum((x[pos_index(i)] - x[pos_index(j)]) ** 2)) - margin ** 2
            for i, j in pairs
        ])

    def grad_k(x, k):
        i, j = pairs[k]
        g = np.zeros(dim)
        d = 2.0 * (x[pos_index(i)] - x[pos_index(j)])
        g[pos_index(i)] = d
        g[pos_index(j)] = -d
        return g

    def hess_k(k):
        i, j = pairs[k]
        h = np.zeros((dim, dim))
        eye = 2.0 * np.eye(pdim)
        si, sj = pos_index(i), pos_index(j)
        h[si, si] = eye
        h[sj, sj] = eye
        h[si, sj] = -eye
        h[sj, si] = -eye
        return h

    return pairs, values, grad_k, hess_k


def make_pairwise_distance_barrier(system, margin, temperature=10.0):
    """Keep-apart barrier over the closest agent pair.

    For a single pair this is b = ||p_i - p_j||^2 - margin^2 exactly. With
    more agents the hard minimum over pairs is not differentiable at ties, so
    the default combines pairs with a soft minimum at the given temperature
    (which lower-bounds the hard min, hence is conservative). Pass
    ``temperature=None`` for the exact hard-min variant.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    if system.agent_state_dim is None:
        raise ValueError("pairwise barrier needs a per-agent concatenated state layout")
    if system.n_agents < 2:
        raise ValueError("pairwise barrier needs at least two agents")

    pairs, values, grad_k, hess_k = _pair_terms(system, margin)

    if len(pairs) == 1:
        return Barrier(
            value=lambda x: float(values(np.asarray(x, dtype=float))[0]),
            grad=lambda x: grad_k(np.asarray(x, dtype=float), 0),
            hess=lambda x: hess_k(0),
            name=f"pairwise_distance(margin={margin})",
        )

    if temperature is None:
        def value(x):
            return float(np.min(values(np.asarray(x, dtype=float))))

        def grad(x):
            x = np.asarray(x, dtype=float)
            return grad_k(x, int(np.argmin(values(x))))

        def hess(x):
            x = np.asarray(x, dtype=float)
            return hess_k(int(np.argmin(values(x))))

        return Barrier(value, grad, hess, name=f"min_pairwise_distance(margin={margin})")

    t = float(temperature)
    if t <= 0:
        raise ValueError("temperature must be positive (or None for hard min)")

    def _weights(vals):
        # softmin weights: w_k = exp(-t b_k) / sum exp(-t b_j)
        z = -t * vals
        z -= np.max(z)
        w = np.exp(z)
        return w / np.sum(w)

    def value(x):
        x = np.asarray(x, dtype=float)
        vals = values(x)
        z = -t * vals
        zmax = np.max(z)
        return float(-(zmax + np.log(np.sum(np.exp(z - zmax)))) / t)

    def grad(x):
        x = np.asarray(x, dtype=float)
        w = _weights(values(x))
        g = np.zeros(system.state_dim)
        for k, wk in enumerate(w):
            g += wk * grad_k(x, k)
        return g

    def hess(x):
        # d^2 softmin = sum w_k H_k + t (g_bar g_bar^T - sum w_k g_k g_k^T)
        x = np.asarray(x, dtype=float)
        w = _weights(values(x))
        gs = [grad_k(x, k) for k in range(len(w))]
        gbar = sum(wk * gk for wk, gk in zip(w, gs))
        h = np.zeros((system.state_dim, system.state_dim))
        for k, wk in enumerate(w):
            h += wk * hess_k(k)
            h -= t * wk * np.outer(gs[k], gs[k])
        h += t * np.outer(gbar, gbar)
        return h

    return Barrier(value, grad, hess, name=f"softmin_pairwise_distance(margin={margin}, t={t})")


def make_ellipse_barrier(a1, a2):
    """Elliptical keep-out region in relative coordinates.

    b(r) = r_lon^2 / a1^2 + r_lat^2 / a2^2 - 1 over a state whose two leading
    entries are the relative position; trailing entries (velocities) do not
    enter the barrier.
    """
    if a1 <= 0 or a2 <= 0:
        raise ValueError("ellipse semi-axes must be positive")
    inv1, inv2 = 1.0 / a1 ** 2, 1.0 / a2 ** 2

    def value(r):
        r = np.asarray(r, dtype=float)
        return float(r[0] ** 2 * inv1 + r[1] ** 2 * inv2 - 1.0)

    def grad(r):
        r = np.asarray(r, dtype=float)
        g = np.zeros(r.size)
        g[0] = 2.0 * r[0] * inv1
        g[1] = 2.0 * r[1] * inv2
        return g

    def hess(r):
        r = np.asarray(r, dtype=float)
        h = np.zeros((r.size, r.size))
        h[0, 0] = 2.0 * inv1
        h[1, 1] = 2.0 * inv2
        return h

    return Barrier(value, grad, hess, name=f"ellipse(a1={a1}, a2={a2})")


def assemble_constraint(system: ControlAffineSystem, barrier: Barrier,
                        alpha_chain: Sequence[ClassKappaLinear], x) -> CbfLinearConstraint:
    """Linearize the safety condition in the controls at state x.

    Relative degree 1 (one gain):   a_i = g_i(x)^T grad b,
                                    c   = grad b . drift + alpha(b).
    Relative degree 2 (two gains):  with w = hess b . drift + J_drift^T grad b,
                                    a_i = g_i(x)^T w,
                                    c   = w . drift + (k1 + k2) b' + k1 k2 b,
    valid when grad b . g_i == 0 (control enters only through the second
    derivative), which is checked.
    """
    x = system.check_state(x)
    degree = system.relative_degree
    if len(alpha_chain) != degree:
        raise ValueError(
            f"alpha_chain must have {degree} element(s) for a relative-degree-{degree} system")

    g_list = [system.actuation(x, i) for i in range(system.n_agents)]
    grad = np.asarray(barrier.grad(x), dtype=float)
    b = float(barrier.value(x))
    f = np.asarray(system.drift(x), dtype=float)

    if degree == 1:
        a = np.concatenate([g.T @ grad for g in g_list])
        c = float(grad @ f) + float(alpha_chain[0](b))
        return CbfLinearConstraint(a=a, offset=c, agent_dims=system.control_dims)

    if degree != 2:
        raise ValueError(f"unsupported relative degree {degree}")
    if barrier.hess is None:
        raise ValueError(f"{barrier.name}: degree-2 assembly requires a Hessian")

    scale = max(1.0, float(np.max(np.abs(grad))))
    for i, g in enumerate(g_list):
        if np.max(np.abs(g.T @ grad)) > 1e-8 * scale:
            raise ValueError(
                f"{barrier.name}: control enters the first derivative through agent {i}; "
                "use a single-gain chain")

    k1, k2 = alpha_chain[0].gain, alpha_chain[1].gain
    hess = np.asarray(barrier.hess(x), dtype=float)
    w = hess @ f + system.drift_jacobian(x).T @ grad
    bdot = float(grad @ f)
    a = np.concatenate([g.T @ w for g in g_list])
    c = float(w @ f) + (k1 + k2) * bdot + k1 * k2 * b
    return CbfLinearConstraint(a=a, offset=c, agent_dims=system.control_dims)
