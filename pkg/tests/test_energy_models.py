import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit, logsumexp

from dln.energy_models import (DbnStack, GrbmParams, RbmParams, dbn_topdown_sample, dbn_up_pass,
                               grbm_cd_update, grbm_energy, grbm_free_energy,
                               grbm_hidden_conditional, grbm_visible_conditional, greedy_pretrain,
                               init_grbm, init_rbm, rbm_cd_update, rbm_energy, rbm_free_energy,
                               rbm_hidden_conditional, rbm_visible_conditional, train_grbm,
                               train_rbm, with_bottom)
from dln.errors import DimensionError, NumericalError
from oracles import binary_states, tv


def random_grbm(rng, n_v, n_h, scale=0.5):
    return GrbmParams(scale * rng.standard_normal((n_v, n_h)), rng.standard_normal(n_v),
                      rng.standard_normal(n_h), rng.uniform(0.3, 2.0, n_v))


def random_rbm(rng, n_v, n_h, scale=1.0):
    return RbmParams(scale * rng.standard_normal((n_v, n_h)), rng.standard_normal(n_v),
                     rng.standard_normal(n_h))


def grbm_log_partition(p):
    H = binary_states(p.n_hidden)
    wh = H @ p.weights.T
    terms = H @ p.hidden_bias + wh @ p.visible_bias + 0.5 * np.sum(p.visible_var * wh ** 2, axis=1)
    return logsumexp(terms) + 0.5 * np.sum(np.log(2 * np.pi * p.visible_var))


def rbm_log_partition(p):
    V = binary_states(p.n_visible)
    return logsumexp(-rbm_free_energy(p, V))


# --------------------------------------------------------------------------
# enumeration oracles


def test_grbm_hidden_conditional_matches_enumeration():
    rng = np.random.default_rng(0)
    p = random_grbm(rng, 6, 8)
    H = binary_states(8)
    grid = np.linspace(-2, 2, 5)
    for v in rng.choice(grid, size=(20, 6)):
        logw = -grbm_energy(p, np.broadcast_to(v, (len(H), 6)), H)
        post = np.exp(logw - logsumexp(logw))
        np.testing.assert_allclose(grbm_hidden_conditional(p, v), post @ H, rtol=1e-10)


def test_grbm_visible_conditional_is_energy_gaussian():
    rng = np.random.default_rng(1)
    p = random_grbm(rng, 4, 3)
    for h in binary_states(3):
        mean, var = grbm_visible_conditional(p, h)
        vs = rng.standard_normal((10, 4))
        # log p(v|h) differences must equal energy differences
        e = grbm_energy(p, vs, np.broadcast_to(h, (10, 3)))
        logn = -np.sum((vs - mean) ** 2 / (2 * var), axis=1)
        np.testing.assert_allclose(-(e - e[0]), logn - logn[0], rtol=1e-10, atol=1e-12)


def test_grbm_free_energy_matches_enumeration():
    rng = np.random.default_rng(2)
    p = random_grbm(rng, 6, 8)
    H = binary_states(8)
    v = rng.standard_normal((15, 6))
    brute = np.array([-logsumexp(-grbm_energy(p, np.broadcast_to(x, (len(H), 6)), H)) for x in v])
    np.testing.assert_allclose(grbm_free_energy(p, v), brute, rtol=1e-10)


def test_grbm_partition_function_by_quadrature():
    rng = np.random.default_rng(3)
    p = random_grbm(rng, 1, 3)
    x = np.linspace(-30, 30, 200001)
    f = np.exp(-grbm_free_energy(p, x[:, None]))
    assert np.log(np.trapezoid(f, x)) == pytest.approx(grbm_log_partition(p), rel=1e-8)


def test_rbm_conditionals_and_free_energy_match_enumeration():
    rng = np.random.default_rng(4)
    p = random_rbm(rng, 6, 8)
    V, H = binary_states(6), binary_states(8)
    joint = (V @ p.weights @ H.T) + (V @ p.visible_bias)[:, None] + (H @ p.hidden_bias)[None]
    np.testing.assert_allclose(
        joint, -rbm_energy(p, V[:, None, :].repeat(len(H), 1), H[None].repeat(len(V), 0)),
        rtol=1e-12, atol=1e-12)
    logp = joint - logsumexp(joint)
    pv = np.exp(logsumexp(logp, axis=1))
    ph = np.exp(logsumexp(logp, axis=0))
    np.testing.assert_allclose(rbm_hidden_conditional(p, V),
                               np.exp(logp - logsumexp(logp, axis=1, keepdims=True)) @ H, rtol=1e-10)
    np.testing.assert_allclose(rbm_visible_conditional(p, H),
                               (np.exp(logp - logsumexp(logp, axis=0, keepdims=True)).T @ V),
                               rtol=1e-10)
    np.testing.assert_allclose(-rbm_free_energy(p, V) - rbm_log_partition(p), np.log(pv),
                               rtol=1e-10)
    assert ph.sum() == pytest.approx(1.0, rel=1e-12)


@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_free_energy_lower_bounds_energy(n_v, n_h, seed):
    rng = np.random.default_rng(seed)
    p = random_grbm(rng, n_v, n_h)
    v = rng.standard_normal(n_v)
    H = binary_states(n_h)
    e = grbm_energy(p, np.broadcast_to(v, (len(H), n_v)), H)
    f = float(grbm_free_energy(p, v))
    assert f <= e.min() + 1e-12
    assert f == pytest.approx(-logsumexp(-e), rel=1e-10, abs=1e-10)
    ph = grbm_hidden_conditional(p, v)
    assert np.all((ph >= 0) & (ph <= 1))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_grbm_hidden_conditional_is_logistic(n_v, n_h, seed):
    rng = np.random.default_rng(seed)
    p = random_grbm(rng, n_v, n_h)
    v = rng.standard_normal((3, n_v))
    np.testing.assert_allclose(grbm_hidden_conditional(p, v),
                               expit(v @ p.weights + p.hidden_bias), rtol=1e-14)


# --------------------------------------------------------------------------
# learning


def test_cd_rate_zero_is_identity():
    rng = np.random.default_rng(5)
    p = random_grbm(rng, 4, 3)
    q, stats = grbm_cd_update(p, rng.standard_normal((8, 4)), rate=0.0, rng=rng,
                              learn_variance=True)
    for a, b in ((p.weights, q.weights), (p.visible_bias, q.visible_bias),
                 (p.hidden_bias, q.hidden_bias), (p.visible_var, q.visible_var)):
        assert a.tobytes() == b.tobytes()
    assert stats.grad_norm > 0
    r = random_rbm(rng, 3, 2)
    r2, _ = rbm_cd_update(r, rng.integers(0, 2, (5, 3)), rate=0.0, rng=rng)
    assert r2.weights.tobytes() == r.weights.tobytes()


def test_cd_rejects_negative_rate_and_zero_steps():
    rng = np.random.default_rng(0)
    p = random_grbm(rng, 2, 2)
    with pytest.raises(ValueError):
        grbm_cd_update(p, np.zeros((1, 2)), rate=-1.0, rng=rng)
    with pytest.raises(ValueError):
        grbm_cd_update(p, np.zeros((1, 2)), steps=0, rng=rng)


def test_rbm_cd_increases_exact_log_likelihood():
    rng = np.random.default_rng(6)
    patterns = np.array([[1, 1, 1, 0, 0, 0], [0, 0, 0, 1, 1, 1]], dtype=float)
    data = patterns[rng.integers(0, 2, 400)]
    p = init_rbm(6, 4, rng, data=data)

    def ll(q):
        return float(np.mean(-rbm_free_energy(q, data)) - rbm_log_partition(q))

    before = ll(p)
    p, hist = train_rbm(p, data, 60, rng, batch_size=20, rate=0.1)
    assert ll(p) > before + 1.0
    assert len(hist) == 60


def test_grbm_cd_increases_exact_log_likelihood():
    rng = np.random.default_rng(7)
    centres = np.array([[-1.5, 1.0], [1.5, -1.0]])
    data = centres[rng.integers(0, 2, 500)] + 0.3 * rng.standard_normal((500, 2))
    p = init_grbm(2, 4, rng, data=data, variance=0.3)

    def ll(q):
        return float(np.mean(-grbm_free_energy(q, data)) - grbm_log_partition(q))

    before = ll(p)
    p, _ = train_grbm(p, data, 80, rng, batch_size=25, rate=0.05)
    assert ll(p) > before + 0.3


def test_variance_learning_reaches_data_variance():
    rng = np.random.default_rng(8)
    data = 1.0 + 2.0 * rng.standard_normal((4000, 3))
    p = GrbmParams(np.zeros((3, 1)), np.ones(3), np.zeros(1), np.full(3, 0.5))
    for _ in range(10):
        p, _ = train_grbm(p, data, 1, rng, batch_size=100, rate=0.05, learn_variance=True)
        p = GrbmParams(np.zeros((3, 1)), p.visible_bias, np.zeros(1), p.visible_var)
    np.testing.assert_allclose(p.visible_var, 4.0, rtol=0.15)


def test_cd_fixed_point_at_zero_weights():
    # independent Gaussian data with the exact mean and variance: expected CD gradient is zero
    rng = np.random.default_rng(9)
    p = GrbmParams(np.zeros((2, 2)), np.array([0.3, -0.2]), np.zeros(2), np.array([0.5, 2.0]))
    data = p.visible_bias + np.sqrt(p.visible_var) * rng.standard_normal((200000, 2))
    from dln.energy_models import grbm_cd_gradient
    grads, _ = grbm_cd_gradient(p, data, 1, rng, learn_variance=True)
    for g in grads.values():
        assert np.max(np.abs(g)) < 0.02


# --------------------------------------------------------------------------
# DBN


def test_dbn_topdown_matches_top_rbm_marginal():
    rng = np.random.default_rng(10)
    bottom = random_grbm(rng, 3, 3)
    top = random_rbm(rng, 3, 2, scale=1.5)
    stack = DbnStack(bottom, (top,))
    samples = []
    for k in range(4000):
        samples.append(dbn_topdown_sample(stack, 25, rng, num_samples=1))
    samples = np.concatenate(samples)
    # each sample mean is b + var * W h for the sampled top-visible h
    H = binary_states(3)
    means = bottom.visible_bias + bottom.visible_var * (H @ bottom.weights.T)
    idx = np.argmin(((samples[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    emp = np.bincount(idx, minlength=8)
    exact = np.exp(-rbm_free_energy(top, H))
    assert tv(emp, exact) < 0.04


def test_dbn_topdown_without_upper_samples_grbm():
    rng = np.random.default_rng(11)
    p = GrbmParams(np.zeros((2, 1)), np.array([1.0, -1.0]), np.zeros(1), np.array([0.25, 1.0]))
    s = dbn_topdown_sample(DbnStack(p), 3, rng, num_samples=20000, return_mean=False)
    np.testing.assert_allclose(s.mean(0), p.visible_bias, atol=0.03)
    np.testing.assert_allclose(s.var(0), p.visible_var, rtol=0.05)


def test_up_pass_and_greedy_pretrain_shapes():
    rng = np.random.default_rng(12)
    data = rng.standard_normal((50, 5))
    stack = greedy_pretrain(data, [4, 3, 2], 2, rng, batch_size=10)
    assert stack.n_visible == 5 and len(stack.upper) == 2
    layers = dbn_up_pass(stack, data)
    assert [l.shape for l in layers] == [(50, 4), (50, 3), (50, 2)]
    sampled = dbn_up_pass(stack, data, sample=True, rng=rng)
    assert all(set(np.unique(l)) <= {0.0, 1.0} for l in sampled)
    with pytest.raises(ValueError):
        dbn_up_pass(stack, data, sample=True)
    new = with_bottom(stack, random_grbm(rng, 5, 4))
    assert new.upper == stack.upper


def test_parameter_validation():
    with pytest.raises(ValueError):
        GrbmParams(np.zeros((2, 1)), np.zeros(2), np.zeros(1), np.array([1.0, 0.0]))
    with pytest.raises(NumericalError):
        GrbmParams(np.zeros((2, 1)), np.zeros(2), np.zeros(1), np.array([1.0, np.nan]))
    with pytest.raises(DimensionError):
        GrbmParams(np.zeros((2, 1)), np.zeros(3), np.zeros(1), np.ones(2))
    g = GrbmParams(np.zeros((2, 3)), np.zeros(2), np.zeros(3), np.ones(2))
    with pytest.raises(DimensionError):
        DbnStack(g, (RbmParams(np.zeros((2, 2)), np.zeros(2), np.zeros(2)),))
    with pytest.raises(DimensionError):
        grbm_hidden_conditional(g, np.zeros(3))
