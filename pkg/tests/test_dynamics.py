import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from respalloc.dynamics import (agent_spec, AgentSpec, euler_rollout,
                                make_double_integrator_2d,
                                make_relative_double_integrator,
                                make_single_integrator_1d, relative_state)


def test_single_integrator_identity_actuation():
    sys = make_single_integrator_1d(2)
    x = np.array([0.0, 1.5])
    assert np.allclose(sys.xdot(x, [1.0, -1.0]), [1.0, -1.0])
    assert np.allclose(sys.xdot(x, [0.0, 0.0]), [0.0, 0.0])


def test_single_integrator_dimensions():
    sys = make_single_integrator_1d(6)
    assert sys.state_dim == 6
    assert sys.control_dim_total == 6
    assert sys.relative_degree == 1


def test_double_integrator_drift_and_actuation():
    sys = make_double_integrator_2d(1)
    x = np.array([0.0, 0.0, 1.0, 2.0])
    assert np.allclose(sys.xdot(x, [0.0, 0.0]), [1.0, 2.0, 0.0, 0.0])
    x = np.array([0.0, 0.0, 0.0, 0.0])
    assert np.allclose(sys.xdot(x, [3.0, -1.0]), [0.0, 0.0, 3.0, -1.0])


def test_double_integrator_dimensions():
    sys = make_double_integrator_2d(6)
    assert sys.state_dim == 24
    assert sys.control_dim_total == 12
    assert sys.relative_degree == 2


def test_relative_system_closed_forms():
    sys = make_relative_double_integrator()
    r = np.array([0.0, 0.0, 1.0, 0.0])
    assert np.allclose(sys.xdot(r, [0, 0, 0, 0]), [1.0, 0.0, 0.0, 0.0])
    r = np.zeros(4)
    # Equal controls cancel in relative coordinates.
    assert np.allclose(sys.xdot(r, [1, 0, 1, 0]), np.zeros(4))
    assert np.allclose(sys.xdot(r, [0, 0, 0, 1]), [0.0, 0.0, 0.0, 1.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_xdot_linear_in_control(seed):
    rng = np.random.default_rng(seed)
    for sys in (make_single_integrator_1d(3), make_double_integrator_2d(2),
                make_relative_double_integrator()):
        x = rng.normal(size=sys.state_dim)
        u = rng.normal(size=sys.control_dim_total)
        v = rng.normal(size=sys.control_dim_total)
        a, b = rng.normal(size=2)
        lhs = sys.xdot(x, a * u + b * v)
        rhs = sys.drift(x) + a * (sys.xdot(x, u) - sys.drift(x)) \
            + b * (sys.xdot(x, v) - sys.drift(x))
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_relative_system_swap_consistency(seed):
    # Swapping the two agents negates r; swapping controls then negates rdot.
    rng = np.random.default_rng(seed)
    sys = make_relative_double_integrator()
    r = rng.normal(size=4)
    u1, u2 = rng.normal(size=2), rng.normal(size=2)
    fwd = sys.xdot(r, np.concatenate([u1, u2]))
    swapped = sys.xdot(-r, np.concatenate([u2, u1]))
    np.testing.assert_allclose(swapped, -fwd, atol=1e-12)


def test_relative_state_negates_under_swap():
    x1 = np.array([0.0, -1.85, 10.0, 0.0])
    x2 = np.array([-3.0, 1.85, 12.0, 0.1])
    np.testing.assert_allclose(relative_state(x1, x2), -relative_state(x2, x1))


def test_agent_spec_validation():
    with pytest.raises(ValueError):
        AgentSpec(0, 1, -1.0, 1.0)
    with pytest.raises(ValueError):
        AgentSpec(1, 1, 2.0, -2.0)
    spec = agent_spec(1, 2, bound=5.0)
    assert np.allclose(spec.control_lower, [-5.0, -5.0])


def test_euler_rollout_shapes_and_drift():
    sys = make_double_integrator_2d(1)
    x0 = np.array([0.0, 0.0, 1.0, 0.0])
    states, controls = euler_rollout(sys, x0, lambda k, x: np.zeros(2),
                                     dt=0.1, steps=10)
    assert states.shape == (11, 4)
    assert controls.shape == (10, 2)
    np.testing.assert_allclose(states[-1, 0], 1.0, atol=1e-12)
