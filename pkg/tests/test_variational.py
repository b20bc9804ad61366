"""Sampling statistics, log-determinant and MLP checks."""

import numpy as np
import pytest

from elastovi import autodiff as ad
from elastovi.variational import (ConditionalGaussian, LowRankGaussian, MLP,
                                  logdet_lowrank, logdet_lowrank_on_tape,
                                  mlp_forward, sample_x_given_y, sample_y)


def _cov_tolerance(S, n):
    """3 MC standard errors for each empirical covariance entry."""
    d = S.shape[0]
    se = np.empty_like(S)
    for i in range(d):
        for j in range(d):
            se[i, j] = np.sqrt((S[i, i] * S[j, j] + S[i, j] ** 2) / n)
    return 3.0 * se


def test_sample_y_zero_noise_returns_mean():
    q = LowRankGaussian(mean=np.array([1.0, -2.0, 3.0]),
                        factor=np.ones((3, 2)), rho=np.zeros(3))
    y = sample_y(q, np.zeros(2), np.zeros(3))
    np.testing.assert_array_equal(y, q.mean)


def test_sample_y_identity_covariance():
    rng = np.random.default_rng(0)
    d, n = 4, 100_000
    q = LowRankGaussian(mean=np.zeros(d), factor=np.zeros((d, 1)), rho=np.zeros(d))
    ys = sample_y(q, rng.standard_normal((n, 1)), rng.standard_normal((n, d)))
    emp = np.cov(ys.T, bias=True)
    np.testing.assert_array_less(np.abs(emp - np.eye(d)),
                                 _cov_tolerance(np.eye(d), n))


def test_sample_y_lowrank_covariance():
    rng = np.random.default_rng(1)
    d, r, n = 5, 2, 100_000
    q = LowRankGaussian(mean=rng.standard_normal(d),
                        factor=0.7 * rng.standard_normal((d, r)),
                        rho=np.log(rng.uniform(0.5, 1.5, d)))
    ys = sample_y(q, rng.standard_normal((n, r)), rng.standard_normal((n, d)))
    S = q.covariance()
    emp = np.cov(ys.T, bias=True)
    np.testing.assert_array_less(np.abs(emp - S), _cov_tolerance(S, n))


def test_sample_x_zero_noise_is_mlp_mean():
    rng = np.random.default_rng(2)
    q = ConditionalGaussian.initial(d_y=6, d_x=4, hidden=5, rank=2, seed=3)
    y = rng.standard_normal(6)
    x = sample_x_given_y(q, y, np.zeros(2), np.zeros(4))
    np.testing.assert_allclose(x, q.mean(y))


def test_zero_initialized_mlp_outputs_bias():
    q = ConditionalGaussian.initial(d_y=6, d_x=4, hidden=5, rank=2, seed=4)
    for w in q.mlp.weights:
        w[:] = 0.0
    q.mlp.biases[-1][:] = 7.5
    y = np.ones(6)
    np.testing.assert_allclose(q.mean(y), 7.5)
    x = sample_x_given_y(q, y, np.zeros(2), np.ones(4))
    np.testing.assert_allclose(x, 7.5 + np.exp(q.rho))


def test_conditional_covariance_statistics():
    rng = np.random.default_rng(5)
    d_x, r, n = 4, 2, 100_000
    q = ConditionalGaussian.initial(d_y=3, d_x=d_x, hidden=4, rank=r, seed=6)
    q.factor = 0.5 * rng.standard_normal((d_x, r))
    q.rho = np.log(rng.uniform(0.5, 1.0, d_x))
    y = rng.standard_normal(3)
    xs = sample_x_given_y(q, y, rng.standard_normal((n, r)),
                          rng.standard_normal((n, d_x)))
    S = q.factor @ q.factor.T + np.diag(np.exp(2 * q.rho))
    emp = np.cov(xs.T, bias=True)
    np.testing.assert_array_less(np.abs(emp - S), _cov_tolerance(S, n))


# --- log-determinant -----------------------------------------------------------


def test_logdet_zero_factor():
    sigma = np.array([0.5, 2.0, 1.5])
    expect = float(np.sum(np.log(sigma ** 2)))
    assert np.isclose(logdet_lowrank(np.zeros((3, 2)), sigma), expect, rtol=1e-14)


def test_logdet_scalar_case():
    assert np.isclose(logdet_lowrank(np.array([[1.0]]), np.array([1.0])),
                      np.log(2.0), rtol=1e-12)


def test_logdet_matches_dense_oracle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        L = rng.standard_normal((8, 2))
        sigma = rng.uniform(0.3, 2.0, 8)
        dense = np.linalg.slogdet(L @ L.T + np.diag(sigma ** 2))[1]
        assert np.isclose(logdet_lowrank(L, sigma), dense, rtol=1e-10)


def test_logdet_monotone_in_sigma():
    rng = np.random.default_rng(8)
    L = rng.standard_normal((6, 3))
    sigma = rng.uniform(0.5, 1.0, 6)
    base = logdet_lowrank(L, sigma)
    for i in range(6):
        s2 = sigma.copy()
        s2[i] *= 1.3
        assert logdet_lowrank(L, s2) > base


def test_logdet_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        logdet_lowrank(np.zeros((3, 1)), np.array([1.0, 0.0, 1.0]))


def test_logdet_on_tape_matches_and_differentiates():
    rng = np.random.default_rng(9)
    L = rng.standard_normal((7, 2))
    rho = rng.uniform(-1.0, 0.5, 7)
    tape = ad.Tape()
    Lv, rv = tape.input(L), tape.input(rho)
    out = logdet_lowrank_on_tape(tape, Lv, rv, 2)
    tape.mark_output(out)
    assert np.isclose(float(tape.output_value), logdet_lowrank(L, np.exp(rho)),
                      rtol=1e-12)
    gL, gr = tape.backward()
    h = 1e-6
    for j in range(7):
        rp, rm = rho.copy(), rho.copy()
        rp[j] += h
        rm[j] -= h
        fd = (float(tape.forward([L, rp])) - float(tape.forward([L, rm]))) / (2 * h)
        assert np.isclose(gr[j], fd, rtol=1e-5)


# --- MLP -----------------------------------------------------------------------


def test_silu_values():
    assert ad.silu(0.0) == 0.0
    assert np.isclose(ad.silu(1.0), 0.731059, atol=1e-6)


def test_mlp_architecture_and_determinism():
    mlp = MLP.initial(d_in=10, hidden=16, d_out=7, seed=0)
    assert mlp.widths == [10, 16, 16, 16, 7]
    mlp2 = MLP.initial(d_in=10, hidden=16, d_out=7, seed=0)
    for a, b in zip(mlp.weights, mlp2.weights):
        np.testing.assert_array_equal(a, b)


def test_mlp_forward_dim_mismatch():
    q = ConditionalGaussian.initial(d_y=5, d_x=3, hidden=4, rank=1, seed=1)
    with pytest.raises(ValueError):
        q.mean(np.ones(7))


def test_mlp_gradient_fd():
    rng = np.random.default_rng(10)
    mlp = MLP.initial(d_in=4, hidden=5, d_out=3, seed=11)
    y = rng.standard_normal(4)
    proj = rng.standard_normal(3)
    params = []
    for w, b in zip(mlp.weights, mlp.biases):
        params.extend([w, b])
    tape = ad.Tape()
    vars_ = [tape.input(p) for p in params]
    out = mlp_forward(vars_, tape.constant(y))
    tape.mark_output(ad.total(out * proj))
    grads = tape.backward()
    h = 1e-6
    for i, p in enumerate(params):
        flat = p.reshape(-1)
        for j in range(0, flat.size, 3):
            pp = [q.copy() for q in params]
            pm = [q.copy() for q in params]
            pp[i].reshape(-1)[j] += h
            pm[i].reshape(-1)[j] -= h
            fd = (float(tape.forward(pp)) - float(tape.forward(pm))) / (2 * h)
            g = grads[i].reshape(-1)[j]
            assert abs(fd - g) <= 1e-5 * max(abs(fd), abs(g), 1e-8)


def test_reparameterization_gradient_quadratic():
    """d/dmu E[f(y)] with common random numbers matches FD for quadratic f."""
    rng = np.random.default_rng(12)
    d, r, n = 3, 2, 4000
    A = rng.standard_normal((d, d))
    A = A @ A.T + np.eye(d)
    mu = rng.standard_normal(d)
    factor = 0.3 * rng.standard_normal((d, r))
    rho = np.full(d, np.log(0.5))
    e1 = rng.standard_normal((n, r))
    e2 = rng.standard_normal((n, d))

    def mean_f(mu_v):
        ys = mu_v + e1 @ factor.T + np.exp(rho) * e2
        return float(np.mean(np.sum((ys @ A) * ys, axis=1)))

    tape = ad.Tape()
    mu_in = tape.input(mu)
    ys = mu_in + tape.constant(e1 @ factor.T + np.exp(rho) * e2)
    tape.mark_output((1.0 / n) * ad.total((ys @ tape.constant(A)) * ys))
    (g,) = tape.backward()
    h = 1e-5
    for j in range(d):
        mp, mm = mu.copy(), mu.copy()
        mp[j] += h
        mm[j] -= h
        fd = (mean_f(mp) - mean_f(mm)) / (2 * h)
        assert np.isclose(g[j], fd, rtol=1e-3)
