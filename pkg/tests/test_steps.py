import numpy as np
import pytest
from hypothesis import given, strategies as st

from secure_mle.errors import ProtocolOrderError, ShapeError
from secure_mle.mvn import ParameterSet, condition, log_likelihood, split_cov
from secure_mle.protocol.steps import (
    cn_adjust,
    cn_final,
    cn_initiate,
    compute_noisy_ll,
    en_adjust,
    en_compute,
    fn_adjust,
    trace_coupling,
    uniform_noise,
)

from conftest import random_params, simulate

seeds = st.integers(0, 2**32 - 1)


def test_uniform_noise_bounds(rng):
    z = uniform_noise(rng, (50, 3), 7.0)
    assert z.shape == (50, 3) and np.abs(z).max() <= 7.0
    assert not uniform_noise(rng, (2, 2), 0.0).any()


@given(seed=seeds)
def test_trace_coupling(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(6, 2)), rng.normal(size=(2, 6))
    assert trace_coupling(p, q) == pytest.approx(np.trace(p @ q), rel=1e-12, abs=1e-12)
    with pytest.raises(ShapeError):
        trace_coupling(p, q.T)


def test_initiate_independent_pair(rng):
    state = cn_initiate(ParameterSet([0.0, 0.0], np.eye(2)), [1, 1], 4, rng, 10.0)
    assert np.array_equal(state.covs[1], [[1.0]])
    for k in range(2):
        assert np.array_equal(state.mu_tilde[k], state.noise[k])


def test_initiate_matches_repeated_conditioning(rng):
    params = random_params(rng, 6)
    state = cn_initiate(params, [2, 2, 2], 3, rng, 1.0)
    cov = params.cov
    for k in range(3):
        assert np.allclose(state.covs[k], cov[:2, :2], rtol=1e-12, atol=1e-12)
        if k < 2:
            cov, _ = condition(split_cov(cov, 2), np.zeros((1, 2)), np.zeros(cov.shape[0]))


def test_initiate_zero_noise(rng):
    params = random_params(rng, 4)
    state = cn_initiate(params, [1, 3], 5, rng, 0.0)
    assert np.array_equal(state.mu_tilde[0], np.tile(params.mean[:1], (5, 1)))
    assert np.array_equal(state.mu_tilde[1], np.tile(params.mean[1:], (5, 1)))


def test_noisy_ll_zero_noise(rng):
    params = random_params(rng, 3)
    x = simulate(rng, params, 8)
    mu = np.tile(params.mean, (8, 1))
    assert compute_noisy_ll(mu, params.cov, x, np.zeros((8, 3))) == pytest.approx(log_likelihood(params, x), rel=1e-13)


def test_noisy_ll_scalar_cancellation():
    value = compute_noisy_ll(np.zeros((1, 1)), np.eye(1), np.zeros((1, 1)), np.array([[0.7]]))
    assert value == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)


def _residue_oracle(x, mu, p, r, q, cov):
    """Independent expansion with explicit inverse and n x n products."""
    inv = np.linalg.inv(cov)
    d = x - mu
    mt = mu + p
    a1 = inv @ (x - mt + r).T
    a2 = inv @ (x - mt - r).T + q
    noisy = -0.5 * (x.size * np.log(2 * np.pi) + x.shape[0] * np.log(np.linalg.det(cov))
                    + np.trace((x - mt + r) @ inv @ (x - mt - r).T) + np.trace(r @ inv @ r.T))
    true = -0.5 * (x.size * np.log(2 * np.pi) + x.shape[0] * np.log(np.linalg.det(cov)) + np.trace(d @ inv @ d.T))
    rebuilt = noisy + 0.5 * np.trace(p @ q) - 0.5 * (np.trace(p @ a1) + np.trace(p @ a2) + np.trace(p @ inv @ p.T))
    return noisy, true, rebuilt


@given(seed=seeds)
def test_noise_decomposition(seed):
    rng = np.random.default_rng(seed)
    params = random_params(rng, 2)
    x = simulate(rng, params, 4)
    mu = np.tile(params.mean, (4, 1))
    p, r = rng.uniform(-5, 5, (4, 2)), rng.uniform(-5, 5, (4, 2))
    q = rng.uniform(-5, 5, (2, 4))
    noisy, true, rebuilt = _residue_oracle(x, mu, p, r, q, params.cov)
    assert compute_noisy_ll(mu + p, params.cov, x, r) == pytest.approx(noisy, rel=1e-10)
    assert rebuilt == pytest.approx(true, rel=1e-9, abs=1e-9)


def test_en_compute_zero_noise(rng):
    params = random_params(rng, 2)
    x = simulate(rng, params, 5)
    mu = np.tile(params.mean, (5, 1))
    out = en_compute(mu, params.cov, x, None, rng, 0.0)
    expected = np.linalg.solve(params.cov, (x - mu).T)
    assert np.allclose(out.a1, expected, atol=1e-12) and np.allclose(out.a2, expected, atol=1e-12)
    assert out.ll_running == pytest.approx(log_likelihood(params, x), rel=1e-13)
    later = en_compute(mu, params.cov, x, 10.0, rng, 0.0)
    assert later.ll_running == pytest.approx(10.0 + out.ll_running, rel=1e-13)


def test_en_compute_bundle_consistency(rng):
    params = random_params(rng, 3)
    x = simulate(rng, params, 6)
    out = en_compute(np.tile(params.mean, (6, 1)), params.cov, x, None, rng, 100.0)
    assert np.allclose(out.a1 - (out.a2 - out.q), 2 * np.linalg.solve(params.cov, out.r.T), rtol=1e-10, atol=1e-8)
    with pytest.raises(ShapeError):
        en_compute(np.zeros((6, 2)), params.cov, x, None, rng, 1.0)


def test_en_compute_seed_dependence(rng):
    params = random_params(rng, 2)
    x = simulate(rng, params, 5)
    mu = np.tile(params.mean, (5, 1))
    one = en_compute(mu, params.cov, x, None, np.random.default_rng(1), 10.0)
    two = en_compute(mu, params.cov, x, None, np.random.default_rng(2), 10.0)
    assert one.ll_running != two.ll_running


def test_cn_adjust_independent():
    mu_tail = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(cn_adjust(np.ones((1, 3)), mu_tail, np.zeros((1, 2))), mu_tail)
    with pytest.raises(ShapeError):
        cn_adjust(np.ones((2, 3)), mu_tail, np.zeros((1, 2)))


def test_cn_adjust_zero_noise_is_conditional_mean(rng):
    params = random_params(rng, 3)
    x = simulate(rng, params, 7)
    state = cn_initiate(params, [1, 2], 7, rng, 0.0)
    out = en_compute(state.mu_tilde[0], state.covs[0], x[:, :1], None, rng, 0.0)
    b = cn_adjust(out.a1, state.tail_mu_tilde(0), state.crosses[0])
    _, oracle = condition(split_cov(params.cov, 1), x[:, :1], params.mean)
    assert np.allclose(b, oracle, atol=1e-12)


def _two_node_chain(rng, params, x, scale):
    """Run node 1 -> central -> node 2 by hand; returns pieces for checks."""
    n = x.shape[0]
    state = cn_initiate(params, [1, 2], n, rng, scale)
    first = en_compute(state.mu_tilde[0], state.covs[0], x[:, :1], None, rng, scale)
    b = cn_adjust(first.a1, state.tail_mu_tilde(0), state.crosses[0])
    adj = en_adjust(b, state.gains[0], first.r, state.noise[0], first.q, first.ll_running, None, 2, rng, scale)
    return state, first, adj


def test_en_adjust_recovers_conditional_mean(rng):
    params = random_params(rng, 3)
    x = simulate(rng, params, 9)
    state, first, adj = _two_node_chain(rng, params, x, 50.0)
    _, oracle = condition(split_cov(params.cov, 1), x[:, :1], params.mean)
    # what the second node holds is the true conditional mean plus its own P
    assert np.allclose(adj.mu_tilde_own, oracle + state.noise[1], rtol=1e-9, atol=1e-9)
    assert adj.mu_star_tail is None and adj.m_new is None
    state0, _, adj0 = _two_node_chain(rng, params, x, 0.0)
    assert np.allclose(adj0.mu_tilde_own, oracle, atol=1e-12)


def test_en_adjust_masks_tail(rng):
    params = random_params(rng, 4)
    x = simulate(rng, params, 5)
    state = cn_initiate(params, [1, 1, 2], 5, rng, 10.0)
    first = en_compute(state.mu_tilde[0], state.covs[0], x[:, :1], None, rng, 10.0)
    b = cn_adjust(first.a1, state.tail_mu_tilde(0), state.crosses[0])
    adj = en_adjust(b, state.gains[0], first.r, state.noise[0], first.q, first.ll_running, None, 1, rng, 10.0)
    assert adj.m_new.shape == (5, 2)
    clean = b - (first.r - state.noise[0]) @ state.gains[0]
    assert np.allclose(adj.mu_star_tail - adj.m_new, clean[:, 1:], atol=1e-9)
    with pytest.raises(ProtocolOrderError):
        en_adjust(b, None, first.r, state.noise[0], first.q, 0.0, None, 1, rng, 1.0)


def test_two_node_final(rng):
    params = random_params(rng, 3)
    x = simulate(rng, params, 9)
    state, first, adj = _two_node_chain(rng, params, x, 100.0)
    second = en_compute(adj.mu_tilde_own, state.covs[1], x[:, 1:], adj.ll_star, rng, 100.0)
    ll_star = fn_adjust(second.ll_running, state.noise[1], second.q)
    final = cn_final(ll_star, state.noise, [first.a1, second.a1], [first.a2, second.a2], state.covs)
    assert final == pytest.approx(log_likelihood(params, x), rel=1e-9)
    with pytest.raises(ProtocolOrderError):
        fn_adjust(None, state.noise[1], second.q)
    with pytest.raises(ProtocolOrderError):
        cn_final(ll_star, state.noise, [first.a1, None], [first.a2, second.a2], state.covs)


def test_zero_noise_final_is_running_total(rng):
    params = random_params(rng, 3)
    x = simulate(rng, params, 6)
    state, first, adj = _two_node_chain(rng, params, x, 0.0)
    second = en_compute(adj.mu_tilde_own, state.covs[1], x[:, 1:], adj.ll_star, rng, 0.0)
    ll_star = fn_adjust(second.ll_running, state.noise[1], second.q)
    final = cn_final(ll_star, state.noise, [first.a1, second.a1], [first.a2, second.a2], state.covs)
    assert final == ll_star
