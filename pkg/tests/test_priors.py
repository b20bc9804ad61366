"""Conjugate Gamma updates against 1D quadrature oracles."""

import numpy as np
import pytest
import scipy.integrate as si
import scipy.sparse as sp
from scipy.special import digamma

from elastovi.priors import (JumpPrior, expected_log_theta, expected_theta,
                             gamma_entropy, gamma_kl, gamma_update,
                             log_prior_x_term, theta_block)

A0 = B0 = 1e-8


def quadrature_moments(a0, b0, j_sq):
    """First two moments and <log theta> of p(theta | J) by log-substituted
    quadrature of theta^(a0-1/2) exp(-(b0 + J^2/2) theta); independent of the
    conjugate formula under test."""
    b = b0 + 0.5 * j_sq

    def integral(fn):
        # substitute theta = exp(u); integrand decays at both ends
        def g(u):
            th = np.exp(u)
            return fn(th) * th ** (a0 + 0.5) * np.exp(-b * th)

        peak = np.log((a0 + 0.5) / b)
        val = 0.0
        for lo, hi in ((peak - 40, peak), (peak, peak + 40)):
            val += si.quad(g, lo, hi, limit=400, epsabs=1e-300, epsrel=1e-12)[0]
        return val

    z = integral(lambda t: 1.0)
    m1 = integral(lambda t: t) / z
    m2 = integral(lambda t: t * t) / z
    mlog = integral(np.log) / z
    return m1, m2, mlog


def test_gamma_update_zero_jumps():
    a, b = gamma_update(A0, B0, np.zeros(3))
    np.testing.assert_allclose(a, 0.5 + A0)
    np.testing.assert_allclose(b, B0)
    np.testing.assert_allclose(expected_theta(a, b), (0.5 + A0) / B0)
    assert expected_theta(a, b)[0] > 4.9e7


def test_gamma_update_unit_jump():
    a, b = gamma_update(A0, B0, np.ones(2))
    np.testing.assert_allclose(b, 0.5 + B0)
    np.testing.assert_allclose(expected_theta(a, b), 1.0, rtol=1e-6)


def test_gamma_update_rejects_negative():
    with pytest.raises(ValueError):
        gamma_update(A0, B0, np.array([-1.0]))


@pytest.mark.parametrize("j_sq", [0.04, 1.0, 25.0])
def test_conjugacy_against_quadrature(j_sq):
    """Closed-form posterior moments match brute-force quadrature at rtol 1e-6."""
    a, b = gamma_update(A0, B0, np.array([j_sq]))
    m1, m2, _ = quadrature_moments(A0, B0, j_sq)
    np.testing.assert_allclose(expected_theta(a, b)[0], m1, rtol=1e-6)
    var = a[0] / b[0] ** 2
    np.testing.assert_allclose(m2 - m1 ** 2, var, rtol=1e-6)


def test_conjugacy_quadrature_extreme_prior():
    """The a0 = b0 = 1e-8 regime with zero jumps: enormous expected precision."""
    m1, m2, _ = quadrature_moments(A0, B0, 0.0)
    a, b = gamma_update(A0, B0, np.array([0.0]))
    np.testing.assert_allclose(m1, expected_theta(a, b)[0], rtol=1e-6)


def test_expected_log_theta_values():
    np.testing.assert_allclose(expected_log_theta(np.array([1.0]), np.array([1.0])),
                               digamma(1.0), rtol=1e-12)
    assert abs(digamma(1.0) + 0.5772157) < 1e-6
    np.testing.assert_allclose(expected_theta(np.array([2.0]), np.array([4.0])), 0.5)


def test_expected_log_theta_against_quadrature():
    a, b = 0.5 + 1e-8, 0.7

    def g(u):
        th = np.exp(u)
        return np.log(th) * th ** a * np.exp(-b * th)

    def z(u):
        th = np.exp(u)
        return th ** a * np.exp(-b * th)

    peak = np.log(a / b)
    num = sum(si.quad(g, lo, hi, limit=400, epsrel=1e-12)[0]
              for lo, hi in ((peak - 40, peak), (peak, peak + 40)))
    den = sum(si.quad(z, lo, hi, limit=400, epsrel=1e-12)[0]
              for lo, hi in ((peak - 40, peak), (peak, peak + 40)))
    np.testing.assert_allclose(expected_log_theta(np.array([a]), np.array([b]))[0],
                               num / den, rtol=1e-6)


def test_update_idempotent_for_fixed_jumps():
    B = sp.csr_matrix(np.array([[1.0, -1.0]]))
    prior = JumpPrior(B=B, a0=A0, b0=B0)
    x = np.array([[0.3, -0.1], [0.2, 0.05]])
    prior.update(x)
    a1, b1 = prior.a_theta.copy(), prior.b_theta.copy()
    prior.update(x)
    np.testing.assert_array_equal(prior.a_theta, a1)
    np.testing.assert_array_equal(prior.b_theta, b1)


def test_kl_nonnegative_zero_iff_prior():
    assert gamma_kl(A0, B0, A0, B0) == pytest.approx(0.0, abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.uniform(0.1, 5.0)
        b = rng.uniform(0.1, 5.0)
        kl = gamma_kl(a, b, 1.3, 0.8)
        assert kl >= -1e-12
        if abs(a - 1.3) > 0.1 or abs(b - 0.8) > 0.1:
            assert kl > 0


def test_theta_block_is_negative_kl():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.3, 3.0, 6)
    b = rng.uniform(0.3, 3.0, 6)
    np.testing.assert_allclose(theta_block(a, b, 1.2, 0.7),
                               -np.sum(gamma_kl(a, b, 1.2, 0.7)), rtol=1e-10)


def test_theta_block_against_quadrature():
    """<log p(theta)/q(theta)> under q by quadrature equals the closed form."""
    a0, b0 = 0.5, 2.0
    a, b = 1.7, 0.9

    import math

    def integrand(u):
        th = np.exp(u)
        log_q = a * np.log(b) - math.lgamma(a) + (a - 1) * np.log(th) - b * th
        log_p = a0 * np.log(b0) - math.lgamma(a0) + (a0 - 1) * np.log(th) - b0 * th
        q = np.exp(log_q)
        return (log_p - log_q) * q * th  # jacobian d theta = th du

    val = sum(si.quad(integrand, lo, hi, limit=400, epsrel=1e-11)[0]
              for lo, hi in ((-40, 0.0), (0.0, 40)))
    np.testing.assert_allclose(theta_block(np.array([a]), np.array([b]), a0, b0),
                               val, rtol=1e-8)


def test_heavier_jumps_weaken_penalty():
    j = np.linspace(0.0, 5.0, 20)
    a, b = gamma_update(A0, B0, j)
    theta = expected_theta(a, b)
    assert np.all(np.diff(theta) < 0)


def test_log_prior_x_term_cases():
    B = sp.csr_matrix(np.array([[1.0, -1.0]]))
    # constant field: no jumps
    assert log_prior_x_term(np.array([[2.0, 2.0]]), B, np.array([1.0]),
                            np.array([0.5])) == 0.0
    # single jump 1 with <theta> = 2: -0.5 * 1 * 2 = -1
    a, b = np.array([2.0]), np.array([1.0])
    assert log_prior_x_term(np.array([[1.0, 0.0]]), B, a, b) == pytest.approx(-1.0)


def test_log_prior_x_term_dense_oracle():
    rng = np.random.default_rng(2)
    n_e, n_j, L = 7, 5, 4
    Bd = rng.standard_normal((n_j, n_e))
    B = sp.csr_matrix(Bd)
    x = rng.standard_normal((L, n_e))
    a = rng.uniform(0.5, 2.0, n_j)
    b = rng.uniform(0.5, 2.0, n_j)
    theta = a / b
    expect = -0.5 * np.mean([xx @ Bd.T @ np.diag(theta) @ Bd @ xx for xx in x])
    np.testing.assert_allclose(log_prior_x_term(x, B, a, b), expect, rtol=1e-12)
