import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from respalloc.models import (ConstantGamma, Mlp, MlpGamma,
                              RelativeSymmetricGamma, SymmetricGammaN,
                              eval_gamma, grad_gamma, init_model, load_model,
                              save_model)


def test_uniform_logits_give_uniform_allocation():
    model = ConstantGamma(2)
    np.testing.assert_allclose(model.gamma(), [0.5, 0.5])
    model4 = ConstantGamma(4)
    np.testing.assert_allclose(model4.gamma(), np.full(4, 0.25))


def test_constant_softmax_jacobian():
    model = ConstantGamma(2)
    jac = grad_gamma(model)
    assert jac[0, 0] == pytest.approx(0.25)
    assert jac[0, 1] == pytest.approx(-0.25)


def test_relative_model_constant_network_is_indifferent():
    model = RelativeSymmetricGamma(context_dim=4)
    model.params = np.zeros_like(model.params)
    for r in np.random.default_rng(0).normal(size=(20, 4), scale=5):
        np.testing.assert_allclose(model.gamma(r), [0.5, 0.5], atol=1e-15)


def test_mlp_parameter_count():
    net = Mlp(4, 1, hidden=16, n_hidden=3)
    expected = (16 * 4 + 16) + 2 * (16 * 16 + 16) + (1 * 16 + 1)
    assert net.n_params == expected
    assert net.params.shape == (expected,)


def test_init_is_seed_deterministic():
    a = init_model("relative", seed=123, context_dim=4)
    b = init_model("relative", seed=123, context_dim=4)
    assert np.array_equal(a.params, b.params)
    c = init_model("relative", seed=124, context_dim=4)
    assert not np.array_equal(a.params, c.params)
    assert np.array_equal(init_model("constant", seed=5, n_agents=3).params,
                          np.zeros(3))


def test_init_weight_scale_statistics():
    # First-layer weights are Uniform(-a, a) with a = 1/sqrt(fan_in), so their
    # variance should sit near a^2/3 when pooled over many draws.
    fan_in = 4
    draws = []
    for seed in range(1000):
        net = Mlp(fan_in, 1, hidden=16, n_hidden=3,
                  rng=np.random.default_rng(seed))
        draws.append(net.params[:16 * fan_in])
    var = np.var(np.concatenate(draws))
    target = (1.0 / fan_in) / 3.0
    assert target / 3.0 < var < target * 3.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_allocations_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    models = [
        ConstantGamma(3, params=rng.normal(size=3)),
        MlpGamma(2, 4, rng=rng),
        SymmetricGammaN(3, 2, rng=rng),
        RelativeSymmetricGamma(4, rng=rng),
    ]
    for model in models:
        ctx = rng.normal(size=(100, model.context_dim), scale=3.0)
        g = model.gamma_batch(ctx)
        assert np.all(g >= 0) and np.all(g <= 1)
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("n_agents", [2, 3, 4])
def test_symmetric_model_permutation_properties(n_agents):
    rng = np.random.default_rng(n_agents)
    d = 2
    model = SymmetricGammaN(n_agents, d, rng=rng)

    def permute(x, order):
        return x.reshape(n_agents, d)[list(order)].ravel()

    for _ in range(25):
        x = rng.normal(size=n_agents * d, scale=2.0)
        g = model.gamma(x)
        # Fixing agent i and shuffling the others leaves gamma_i unchanged.
        for i in range(n_agents):
            others = [j for j in range(n_agents) if j != i]
            order = list(range(n_agents))
            shuffled = rng.permutation(others)
            for slot, j in zip(others, shuffled):
                order[slot] = int(j)
            gp = model.gamma(permute(x, order))
            assert gp[i] == pytest.approx(g[i], abs=1e-12)
        # Swapping agents i and j swaps their allocations.
        for i, j in itertools.combinations(range(n_agents), 2):
            order = list(range(n_agents))
            order[i], order[j] = j, i
            gs = model.gamma(permute(x, order))
            assert gs[j] == pytest.approx(g[i], abs=1e-12)
            assert gs[i] == pytest.approx(g[j], abs=1e-12)


def test_symmetric_model_full_permutation_equivariance():
    # gamma(sigma(x)) = sigma(gamma(x)) for every permutation, N = 3.
    rng = np.random.default_rng(9)
    model = SymmetricGammaN(3, 2, rng=rng)
    x = rng.normal(size=6)
    g = model.gamma(x)
    for order in itertools.permutations(range(3)):
        xp = x.reshape(3, 2)[list(order)].ravel()
        gp = model.gamma(xp)
        np.testing.assert_allclose(gp, g[list(order)], atol=1e-12)


def test_symmetric_cap():
    with pytest.raises(ValueError, match="capped"):
        SymmetricGammaN(7, 2)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_relative_model_swap_identity(seed):
    rng = np.random.default_rng(seed)
    model = RelativeSymmetricGamma(4, rng=rng)
    r = rng.normal(size=(100, 4), scale=4.0)
    g = model.gamma_batch(r)
    g_neg = model.gamma_batch(-r)
    np.testing.assert_allclose(g[:, 0] + g_neg[:, 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(g[:, 0], g_neg[:, 1], atol=1e-12)
    assert np.all(g > 0) and np.all(g < 1)


def test_unconstrained_model_breaks_swap_identity():
    # Witness, not a universal claim: a random unconstrained network
    # generically violates gamma1(r) + gamma1(-r) = 1 somewhere.
    model = MlpGamma(2, 4, rng=np.random.default_rng(0))
    r = np.random.default_rng(1).normal(size=(200, 4), scale=3.0)
    gap = model.gamma_batch(r)[:, 0] + model.gamma_batch(-r)[:, 0] - 1.0
    assert np.max(np.abs(gap)) > 1e-3


def _directional_fd(model, ctx, direction, step=1e-6):
    base = model.params.copy()
    model.params = base + step * direction
    up = model.gamma(ctx)
    model.params = base - step * direction
    down = model.gamma(ctx)
    model.params = base
    return (up - down) / (2 * step)


@pytest.mark.parametrize("kind,kwargs", [
    ("constant", {"n_agents": 3}),
    ("mlp", {"n_agents": 2, "context_dim": 4}),
    ("symmetric", {"n_agents": 3, "agent_dim": 2}),
    ("relative", {"context_dim": 4}),
])
def test_parameter_jacobian_matches_finite_differences(kind, kwargs):
    model = init_model(kind, seed=42, **kwargs)
    rng = np.random.default_rng(7)
    ctx = rng.normal(size=model.context_dim, scale=2.0) if model.context_dim else None
    jac = grad_gamma(model, ctx)
    assert jac.shape == (model.n_agents, model.params.size)
    for _ in range(5):
        v = rng.normal(size=model.params.size)
        v /= np.linalg.norm(v)
        fd = _directional_fd(model, ctx, v)
        np.testing.assert_allclose(jac @ v, fd, rtol=1e-4, atol=1e-8)


def test_zeroed_head_gradient_is_uniform_softmax_jacobian():
    # Zero the final affine layer: logits vanish, gamma is uniform, and the
    # gradient in the head bias is the softmax Jacobian at uniform.
    model = MlpGamma(2, 4, rng=np.random.default_rng(3))
    params = model.params.copy()
    head = 16 * 2 + 2
    params[-head:] = 0.0
    model.params = params
    ctx = np.array([0.3, -1.0, 0.7, 0.2])
    np.testing.assert_allclose(model.gamma(ctx), [0.5, 0.5], atol=1e-15)
    jac = grad_gamma(model, ctx)
    bias_cols = jac[:, -2:]
    np.testing.assert_allclose(bias_cols, [[0.25, -0.25], [-0.25, 0.25]],
                               atol=1e-12)


def test_batched_vjp_equals_sum_of_singles():
    model = init_model("relative", seed=0, context_dim=4)
    rng = np.random.default_rng(5)
    ctx = rng.normal(size=(6, 4))
    dg = rng.normal(size=(6, 2))
    batched = model.vjp_params_batch(ctx, dg)
    singles = sum(model.vjp_params_batch(ctx[i:i + 1], dg[i:i + 1])
                  for i in range(6))
    np.testing.assert_allclose(batched, singles, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kind,kwargs", [
    ("constant", {"n_agents": 4}),
    ("mlp", {"n_agents": 2, "context_dim": 4}),
    ("symmetric", {"n_agents": 3, "agent_dim": 4}),
    ("relative", {"context_dim": 4}),
])
def test_checkpoint_roundtrip_is_bit_exact(kind, kwargs, tmp_path):
    model = init_model(kind, seed=99, **kwargs)
    model.params = model.params + np.random.default_rng(1).normal(
        size=model.params.size, scale=0.3)
    path = tmp_path / "model.json"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.kind == model.kind
    assert np.array_equal(loaded.params, model.params)
    ctx = np.linspace(-1, 1, model.context_dim) if model.context_dim else None
    np.testing.assert_array_equal(eval_gamma(loaded, ctx), eval_gamma(model, ctx))


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "other.json"
    path.write_text(json.dumps({"something": 1}))
    with pytest.raises(ValueError, match="not a model checkpoint"):
        load_model(path)
