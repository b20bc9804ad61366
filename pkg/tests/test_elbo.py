"""ELBO assembly: subsampling statistics, enumeration oracle, FD gradients."""

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.stats import chisquare

from elastovi import priors as pr
from elastovi.datagen import make_dataset
from elastovi.elbo import (ElboConfig, ElboModel, record_elbo, sample_xy,
                           subsample_residuals)
from elastovi.mesh import all_shape_gradients, build_structured_mesh, jump_operator
from elastovi.residual import generate_weight_functions, standard_problem
from elastovi.trainer import TrainConfig, build_elbo_model, initial_params, train
from elastovi.variational import logdet_lowrank


def small_setup(seed=0, n_weights=16, tau=10.0, y_variance=1.0):
    mesh = build_structured_mesh(3, 3)
    problem = standard_problem(mesh)
    ds = make_dataset(problem, grid_n=3, snr_db=30.0, seed=seed, refine=2)
    ds.tau = tau
    weights = generate_weight_functions(mesh, n_weights, 0.3, seed=seed + 1)
    model = build_elbo_model(problem, ds, weights, y_variance=y_variance)
    params = initial_params(model, d_x=mesh.n_elements, hidden=8, rank_x=3,
                            rank_y=3, seed=seed + 2)
    rng = np.random.default_rng(seed + 3)
    params.mu_y += 0.02 * rng.standard_normal(params.mu_y.shape)
    params.factor_y += 0.02 * rng.standard_normal(params.factor_y.shape)
    params.factor_x += 0.02 * rng.standard_normal(params.factor_x.shape)
    params.rho_y[:] = np.log(0.1)
    params.rho_x[:] = np.log(0.1)
    return mesh, problem, ds, weights, model, params


# --- residual subsampling -------------------------------------------------------


def test_subsample_single():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert subsample_residuals(1, 1, rng)[0] == 0


def test_subsample_uniform_chi2():
    rng = np.random.default_rng(1)
    N, draws = 20, 1_000_000
    idx = subsample_residuals(N, draws, rng)
    counts = np.bincount(idx, minlength=N)
    _, p = chisquare(counts)
    assert p > 0.001


def test_subsample_deterministic():
    a = subsample_residuals(100, 50, np.random.default_rng(7))
    b = subsample_residuals(100, 50, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_subsample_without_replacement_bounds():
    rng = np.random.default_rng(2)
    idx = subsample_residuals(10, 10, rng, with_replacement=False)
    assert sorted(idx) == list(range(10))
    with pytest.raises(ValueError):
        subsample_residuals(5, 6, rng, with_replacement=False)


def test_elbo_config_validation():
    with pytest.raises(ValueError):
        ElboConfig(lam=-1.0, tau=1.0)
    with pytest.raises(ValueError):
        ElboConfig(lam=1.0, tau=0.0)
    with pytest.raises(ValueError):
        ElboConfig(K=0)


# --- term-by-term reduction at lambda = 0 ---------------------------------------


def test_lambda_zero_reduces_to_datafit_priors_entropy():
    mesh, problem, ds, weights, model, params = small_setup()
    cfg = ElboConfig(lam=0.0, tau=ds.tau, K=4, L=6)
    seed = 99
    est = record_elbo(model, params, cfg, np.random.default_rng(seed), phase1=False)

    # manual reconstruction with the identical noise stream
    rng = np.random.default_rng(seed)
    L = cfg.L
    e1 = rng.standard_normal((L, params.factor_y.shape[1]))
    e2 = rng.standard_normal((L, model.d_y_free))
    y_free = params.mu_y + e1 @ params.factor_y.T + np.exp(params.rho_y) * e2
    y = y_free @ model.select_op.T.toarray() + model.fixed_values
    from elastovi.variational import mlp_forward

    mu_x = mlp_forward(params.mlp_params, y)
    e3 = rng.standard_normal((L, params.factor_x.shape[1]))
    e4 = rng.standard_normal((L, params.rho_x.shape[0]))
    x = mu_x + e3 @ params.factor_x.T + np.exp(params.rho_x) * e4

    u = y @ model.obs_op.T.toarray()
    misfit = -cfg.tau / (2 * L) * np.sum((u - ds.u_hat) ** 2)
    y_prior = -np.sum(y_free ** 2) / (2 * L * model.y_prior_variance)
    J = x @ model.jump.B.T.toarray().T  # (L, n_jumps) via dense for clarity
    theta = model.jump.expected_theta()
    x_prior = -np.mean(np.sum((x @ model.jump.B.toarray().T) ** 2 * theta, axis=1)) / 2
    ent = 0.5 * logdet_lowrank(params.factor_y, np.exp(params.rho_y)) \
        + 0.5 * logdet_lowrank(params.factor_x, np.exp(params.rho_x))
    tb = pr.theta_block(model.jump.a_theta, model.jump.b_theta, model.jump.a0,
                        model.jump.b0)
    np.testing.assert_allclose(est.value, misfit + y_prior + x_prior + ent + tb,
                               rtol=1e-10)


# --- full-enumeration oracle ------------------------------------------------------


def test_virtual_term_full_enumeration_oracle():
    """K = N without replacement, large L: the virtual term equals an
    independently assembled mean of squared residuals over all weight
    functions, with common random numbers."""
    mesh, problem, ds, weights, model, params = small_setup(n_weights=12)
    N = len(weights)
    L = 10_000
    lam = 40.0
    cfg = ElboConfig(lam=lam, tau=ds.tau, K=N, L=L, with_replacement=False)
    seed = 5
    est = record_elbo(model, params, cfg, np.random.default_rng(seed))

    # replicate the posterior draws, then enumerate residuals independently
    rng = np.random.default_rng(seed)
    e1 = rng.standard_normal((L, params.factor_y.shape[1]))
    e2 = rng.standard_normal((L, model.d_y_free))
    y_free = params.mu_y + e1 @ params.factor_y.T + np.exp(params.rho_y) * e2
    y = y_free @ model.select_op.T.toarray() + model.fixed_values
    from elastovi.variational import mlp_forward

    x = mlp_forward(params.mlp_params, y)
    e3 = rng.standard_normal((L, params.factor_x.shape[1]))
    e4 = rng.standard_normal((L, params.rho_x.shape[0]))
    x = x + e3 @ params.factor_x.T + np.exp(params.rho_x) * e4

    grads, areas = all_shape_gradients(mesh)
    nu = problem.nu
    E = np.exp(x)
    mu = E / (2 * (1 + nu))
    lam_l = E * nu / ((1 + nu) * (1 - 2 * nu))
    g = np.zeros((L, mesh.n_elements, 2, 2))
    tri = mesh.elements
    for c in range(2):
        nodal = y[:, 2 * tri + c]  # (L, n_e, 3)
        for b_ax in range(2):
            g[:, :, c, b_ax] = np.sum(nodal * grads[None, :, :, b_ax], axis=2)
    tr = g[:, :, 0, 0] + g[:, :, 1, 1]
    s = np.empty((L, mesh.n_elements, 3))
    s[:, :, 0] = lam_l * tr + 2 * mu * g[:, :, 0, 0]
    s[:, :, 1] = lam_l * tr + 2 * mu * g[:, :, 1, 1]
    s[:, :, 2] = mu * (g[:, :, 0, 1] + g[:, :, 1, 0])

    total = 0.0
    from elastovi.residual import ResidualOperator

    for w in weights:
        op = ResidualOperator(problem, [w])
        c = w.component - 1
        gw = np.zeros((mesh.n_elements, 2))
        active = np.zeros(mesh.n_nodes)
        active[w.nodes] = 1.0
        for e in range(mesh.n_elements):
            for k in range(3):
                gw[e] += active[tri[e, k]] * grads[e, k]
        if c == 0:
            integ = s[:, :, 0] * gw[:, 0] + s[:, :, 2] * gw[:, 1]
        else:
            integ = s[:, :, 2] * gw[:, 0] + s[:, :, 1] * gw[:, 1]
        r = integ @ areas - float(op.boundary[0])
        total += np.sum(r ** 2)
    oracle_term = -lam / (2 * N * L) * total

    # isolate the virtual term from the recorded value by subtracting the rest
    cfg0 = ElboConfig(lam=0.0, tau=ds.tau, K=N, L=L, with_replacement=False)
    est0 = record_elbo(model, params, cfg0, np.random.default_rng(seed))
    np.testing.assert_allclose(est.value - est0.value, oracle_term, rtol=1e-2)
    np.testing.assert_allclose(est.value - est0.value, oracle_term, rtol=1e-9)


def test_order_invariance_of_subsample():
    mesh, problem, ds, weights, model, params = small_setup(n_weights=10)
    from elastovi.elbo import _subset_operator
    from elastovi.residual import GradientOperator
    from elastovi.constitutive import stress_components

    rng = np.random.default_rng(3)
    x, y = sample_xy(model, params, 4, rng)
    g11, g12, g21, g22 = model.grad_op.apply(y)
    s11, s22, s12 = stress_components("linear", g11, g12, g21, g22, x, problem.nu)
    idx = np.array([3, 1, 7, 1, 5])
    r1 = np.asarray(_subset_operator(model.residual_op, idx).apply(s11, s22, s12))
    perm = np.array([2, 0, 4, 3, 1])
    r2 = np.asarray(_subset_operator(model.residual_op, idx[perm]).apply(s11, s22, s12))
    np.testing.assert_allclose(np.sum(r1 ** 2), np.sum(r2 ** 2), rtol=1e-12)


def test_unbiased_subsampling_mini():
    """Subsampled virtual sums average to the full-pool value (3 sigma)."""
    mesh, problem, ds, weights, model, params = small_setup(n_weights=12)
    rng = np.random.default_rng(4)
    x, y = sample_xy(model, params, 1, rng)
    from elastovi.constitutive import stress_components

    g11, g12, g21, g22 = model.grad_op.apply(y)
    s11, s22, s12 = stress_components("linear", g11, g12, g21, g22, x, problem.nu)
    r_all = np.asarray(model.residual_op.apply(s11, s22, s12))[0]
    full_mean = np.mean(r_all ** 2)
    K, n_draws = 3, 20_000
    means = np.empty(n_draws)
    for i in range(n_draws):
        idx = subsample_residuals(len(weights), K, rng)
        means[i] = np.mean(r_all[idx] ** 2)
    se = means.std(ddof=1) / np.sqrt(n_draws)
    assert abs(means.mean() - full_mean) <= 3 * se


def test_gradients_fd_mini():
    """Spot FD check of the recorded gradients (full sweep in acceptance)."""
    mesh, problem, ds, weights, model, params = small_setup()
    model.jump.update(np.abs(np.random.default_rng(0).standard_normal((4, 8))))
    cfg = ElboConfig(lam=50.0, tau=ds.tau, K=5, L=3)
    est = record_elbo(model, params, cfg, np.random.default_rng(11))
    tape = est.tape
    arrays = params.all_arrays()
    rng = np.random.default_rng(12)
    h = 1e-5
    for i in range(len(arrays)):
        flat = arrays[i].reshape(-1)
        for j in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            ip = [a.copy() for a in arrays]
            im = [a.copy() for a in arrays]
            ip[i].reshape(-1)[j] += h
            im[i].reshape(-1)[j] -= h
            fd = (float(tape.forward(ip)) - float(tape.forward(im))) / (2 * h)
            g = est.gradients[i].reshape(-1)[j]
            assert abs(fd - g) <= 1e-4 * max(abs(fd), abs(g), 1e-7)


def test_nonfinite_elbo_raises():
    mesh, problem, ds, weights, model, params = small_setup()
    params.mu_y[:] = 1e200  # drives the quadratic terms to overflow
    cfg = ElboConfig(lam=1.0, tau=ds.tau, K=2, L=2)
    with pytest.raises(FloatingPointError):
        record_elbo(model, params, cfg, np.random.default_rng(0))


def test_lambda_zero_with_no_observations_converges_to_prior():
    """Maximizing the ELBO with no data drives q(y) onto the prior."""
    mesh = build_structured_mesh(3, 3)
    problem = standard_problem(mesh)

    class Empty:
        obs_points = np.zeros((0, 2))
        u_hat = np.zeros(0)
        tau = 1.0

    model = build_elbo_model(problem, Empty(), [], y_variance=1.0,
                             dirichlet_given=True)
    params = initial_params(model, d_x=mesh.n_elements, hidden=4, rank_x=2,
                            rank_y=2, seed=0)
    cfg = TrainConfig(lam=0.0, K=1, L=8, lr=0.02, iters_phase1=3000,
                      iters_phase2=0, seed=1, log_every=1000)
    ckpt = train(model, params, cfg)
    # polish at a small step size to squeeze out the stochastic ADAM noise
    cfg_fine = TrainConfig(lam=0.0, K=1, L=64, lr=2e-4, iters_phase1=6000,
                           iters_phase2=0, seed=2, log_every=1000)
    ckpt = train(model, ckpt.params, cfg_fine)
    # KL( q || N(0, I) ) over the free DOFs
    S = ckpt.params.factor_y @ ckpt.params.factor_y.T \
        + np.diag(np.exp(2 * ckpt.params.rho_y))
    d = S.shape[0]
    kl = 0.5 * (np.trace(S) + ckpt.params.mu_y @ ckpt.params.mu_y - d
                - np.linalg.slogdet(S)[1])
    assert kl < 1e-3
