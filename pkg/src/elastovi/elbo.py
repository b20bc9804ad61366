"""Stochastic ELBO assembly with randomized residual subsampling.

Per iteration the objective is estimated from L reparameterized posterior
samples and K weight functions drawn uniformly from the pool of N:

    ELBO ~  - lambda/2 * (1/KL) sum_kl r_k(x_l, y_l)^2          virtual term
            - tau/(2L)  * sum_il (uhat_i - u_i(y_l))^2          data misfit
            - 1/(2L v_y) * sum_l |y_l|^2                        y prior
            - 1/(2L)    * sum_l (B x_l)' diag(<theta>) (B x_l)  jump prior
            + <log p(theta)> + H[q(theta)]                      theta block
            + 1/2 log det S_y + 1/2 log det S_x                 entropies

The categorical K-of-N subsample makes the virtual term unbiased; the N/K
rescaling is absorbed into the configured lambda.  The whole expression is
recorded on one autodiff tape so a single backward pass yields every
parameter gradient; noise and subsample indices live on the tape as
constants, which also gives finite-difference checks common random numbers
for free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import priors as pr
from .autodiff import matvec
from .constitutive import stress_components
from .residual import GradientOperator, ResidualOperator
from .variational import logdet_lowrank_on_tape, mlp_forward


@dataclass
class ElboConfig:
    """Inference hyperparameters.

    lam is the virtual-observation precision with the weight-function count
    already absorbed; tau the observation precision; K the residuals drawn
    per iteration; L the posterior sample pairs per iteration.
    """

    lam: float = 1e7
    tau: float = 1.0
    K: int = 200
    L: int = 10
    with_replacement: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.tau <= 0:
            raise ValueError("need lambda >= 0 and tau > 0")
        if self.K < 1 or self.L < 1:
            raise ValueError("need K >= 1 and L >= 1")


def subsample_residuals(N: int, K: int, rng: np.random.Generator,
                        with_replacement: bool = True) -> np.ndarray:
    """K indices drawn i.i.d. uniform over range(N) (with replacement)."""
    if K < 1 or N < 1:
        raise ValueError("need K >= 1 and N >= 1")
    if with_replacement:
        return rng.integers(0, N, size=K)
    if K > N:
        raise ValueError("K > N requires sampling with replacement")
    return rng.choice(N, size=K, replace=False)


@dataclass
class VariationalParams:
    """Flat, ordered view of every trainable array.

    Order: mu_y, factor_y, rho_y, MLP (w0, b0, w1, b1, ...), factor_x, rho_x.
    Phase-1 training touches only the first three.
    """

    mu_y: np.ndarray
    factor_y: np.ndarray
    rho_y: np.ndarray
    mlp_params: list
    factor_x: np.ndarray
    rho_x: np.ndarray

    N_Y_PARAMS = 3

    def y_arrays(self):
        return [self.mu_y, self.factor_y, self.rho_y]

    def all_arrays(self):
        return self.y_arrays() + list(self.mlp_params) + [self.factor_x, self.rho_x]

    def names(self):
        mlp = []
        for i in range(len(self.mlp_params) // 2):
            mlp.extend([f"mlp_w{i}", f"mlp_b{i}"])
        return ["mu_y", "factor_y", "rho_y"] + mlp + ["factor_x", "rho_x"]

    def set_arrays(self, arrays):
        self.mu_y, self.factor_y, self.rho_y = arrays[:3]
        n_mlp = len(self.mlp_params)
        self.mlp_params = list(arrays[3:3 + n_mlp])
        self.factor_x, self.rho_x = arrays[3 + n_mlp:]


@dataclass
class ElboModel:
    """Precomputed operators shared across iterations.

    grad_op / residual_op express the physics; obs_op interpolates nodal
    displacements to the observation points; select_op scatters the free
    displacement DOFs into the full vector when Dirichlet data is prescribed
    (identity when it is not, in which case every DOF is inferred).
    """

    problem: object
    grad_op: GradientOperator
    residual_op: ResidualOperator
    obs_op: sp.csr_matrix
    u_hat: np.ndarray
    tau: float
    y_prior_variance: float
    jump: pr.JumpPrior
    select_op: sp.csr_matrix = None
    fixed_values: np.ndarray = None
    x_prior_sigma: float = None  # set to replace the jump prior (comparison mode)

    @property
    def d_y_free(self) -> int:
        if self.select_op is None:
            return self.problem.mesh.n_dofs
        return self.select_op.shape[1]

    def expand_y(self, y_free):
        """Full DOF vector(s) from the free parameterization."""
        if self.select_op is None:
            return y_free
        return matvec(self.select_op, y_free) + self.fixed_values


def selection_operator(dof_mask: np.ndarray) -> sp.csr_matrix:
    """Maps free-DOF vectors into full-DOF vectors (zeros on masked entries)."""
    free = np.flatnonzero(~dof_mask)
    n = dof_mask.size
    return sp.csr_matrix((np.ones(free.size), (free, np.arange(free.size))),
                         shape=(n, free.size))


def observation_operator(mesh, points: np.ndarray) -> sp.csr_matrix:
    """Linear interpolation of both displacement components at given points.

    Row ordering matches the observation vector: (u1, u2) per point.
    """
    pts = np.asarray(points, dtype=np.float64)
    elems = mesh.containing_elements(pts)
    tri = mesh.elements[elems]
    p = mesh.nodes[tri]
    # barycentric coordinates in each containing triangle
    v0 = p[:, 1] - p[:, 0]
    v1 = p[:, 2] - p[:, 0]
    d = pts - p[:, 0]
    det = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    l1 = (d[:, 0] * v1[:, 1] - v1[:, 0] * d[:, 1]) / det
    l2 = (v0[:, 0] * d[:, 1] - d[:, 0] * v0[:, 1]) / det
    bary = np.column_stack([1.0 - l1 - l2, l1, l2])
    n_pts = pts.shape[0]
    rows, cols, vals = [], [], []
    for c in (0, 1):
        for k in range(3):
            rows.append(2 * np.arange(n_pts) + c)
            cols.append(2 * tri[:, k] + c)
            vals.append(bary[:, k])
    return sp.csr_matrix((np.concatenate(vals),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(2 * n_pts, mesh.n_dofs))


@dataclass
class ElboEstimate:
    value: float
    gradients: list
    mean_sq_residual: float = 0.0
    x_samples: np.ndarray = None
    tape: object = field(default=None, repr=False)


def record_elbo(model: ElboModel, params: VariationalParams, cfg: ElboConfig,
                rng: np.random.Generator, phase1: bool = False) -> ElboEstimate:
    """Record one stochastic ELBO estimate on a fresh tape and differentiate it.

    In phase 1 the virtual likelihood is off (lambda = 0) and only the q(y)
    parameters enter the tape.
    """
    tape = ad.Tape()
    d_free = model.d_y_free
    rank_y = params.factor_y.shape[1]
    L = cfg.L

    mu_y = tape.input(params.mu_y)
    factor_y = tape.input(params.factor_y)
    rho_y = tape.input(params.rho_y)

    eps1 = tape.constant(rng.standard_normal((L, rank_y)))
    eps2 = tape.constant(rng.standard_normal((L, d_free)))
    y_free = mu_y + eps1 @ ad.transpose(factor_y) + ad.exp(rho_y) * eps2
    y = model.expand_y(y_free)

    # data misfit
    u = matvec(model.obs_op, y)
    misfit = u - model.u_hat
    elbo = (-cfg.tau / (2.0 * L)) * ad.total(misfit ** 2)

    # y prior (uninformative; kept for exactness)
    elbo = elbo + (-0.5 / (L * model.y_prior_variance)) * ad.total(y_free ** 2)

    # q(y) entropy
    elbo = elbo + 0.5 * logdet_lowrank_on_tape(tape, factor_y, rho_y, rank_y)

    mean_sq = 0.0
    x_samples = None
    if not phase1:
        mlp_vars = [tape.input(p) for p in params.mlp_params]
        factor_x = tape.input(params.factor_x)
        rho_x = tape.input(params.rho_x)
        rank_x = params.factor_x.shape[1]
        d_x = params.rho_x.shape[0]

        mu_x = mlp_forward(mlp_vars, y)
        eps3 = tape.constant(rng.standard_normal((L, rank_x)))
        eps4 = tape.constant(rng.standard_normal((L, d_x)))
        x = mu_x + eps3 @ ad.transpose(factor_x) + ad.exp(rho_x) * eps4
        x_samples = ad.value_of(x).copy()

        # virtual likelihood on a random subset of the weight functions
        if cfg.lam > 0:
            n_w = model.residual_op.n_weights
            idx = subsample_residuals(n_w, cfg.K, rng, cfg.with_replacement)
            sub = _subset_operator(model.residual_op, idx)
            g11, g12, g21, g22 = model.grad_op.apply(y)
            s11, s22, s12 = stress_components(model.problem.law, g11, g12, g21, g22,
                                              x, model.problem.nu)
            r = sub.apply(s11, s22, s12)
            sum_r2 = ad.total(r ** 2)
            elbo = elbo + (-cfg.lam / (2.0 * cfg.K * L)) * sum_r2
            mean_sq = float(ad.value_of(sum_r2)) / (cfg.K * L)

        if model.x_prior_sigma is not None:
            # comparison mode: plain isotropic Gaussian prior on x
            elbo = elbo + (-0.5 / (L * model.x_prior_sigma ** 2)) * ad.total(x ** 2)
        else:
            # jump prior with fixed theta expectations
            theta = model.jump.expected_theta()
            J = matvec(model.jump.B, x)
            elbo = elbo + (-0.5 / L) * ad.total(J ** 2 * theta)

        # q(x|y) entropy
        elbo = elbo + 0.5 * logdet_lowrank_on_tape(tape, factor_x, rho_x, rank_x)

        if model.x_prior_sigma is None:
            # theta block: constant w.r.t. the tape inputs, added for the trace
            elbo = elbo + pr.theta_block(model.jump.a_theta, model.jump.b_theta,
                                         model.jump.a0, model.jump.b0)

    tape.mark_output(elbo)
    value = float(tape.output_value)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite ELBO estimate")
    grads = tape.backward()
    return ElboEstimate(value=value, gradients=grads, mean_sq_residual=mean_sq,
                        x_samples=x_samples, tape=tape)


def _subset_operator(residual_op: ResidualOperator, idx: np.ndarray):
    """Row-sliced view of a residual operator for one subsample."""
    sub = ResidualOperator.__new__(ResidualOperator)
    sub.factors = {k: m[idx] for k, m in residual_op.factors.items()}
    sub.boundary = residual_op.boundary[idx]
    sub.n_weights = idx.size
    return sub


def sample_xy(model: ElboModel, params: VariationalParams, n: int,
              rng: np.random.Generator):
    """Plain (non-tape) posterior draws; returns (X, Y_full) with n rows."""
    rank_y = params.factor_y.shape[1]
    d_free = model.d_y_free
    eps1 = rng.standard_normal((n, rank_y))
    eps2 = rng.standard_normal((n, d_free))
    y_free = params.mu_y + eps1 @ params.factor_y.T + np.exp(params.rho_y) * eps2
    y = np.asarray(model.expand_y(y_free))
    mu_x = mlp_forward(params.mlp_params, y)
    eps3 = rng.standard_normal((n, params.factor_x.shape[1]))
    eps4 = rng.standard_normal((n, params.rho_x.shape[0]))
    x = mu_x + eps3 @ params.factor_x.T + np.exp(params.rho_x) * eps4
    return x, y


def mean_squared_residual(model: ElboModel, params: VariationalParams,
                          n_samples: int, rng: np.random.Generator) -> float:
    """Held-out <r^2> over every weight function in the pool."""
    if model.residual_op.n_weights == 0:
        return 0.0
    x, y = sample_xy(model, params, n_samples, rng)
    g11, g12, g21, g22 = model.grad_op.apply(y)
    s11, s22, s12 = stress_components(model.problem.law, g11, g12, g21, g22,
                                      x, model.problem.nu)
    r = model.residual_op.apply(s11, s22, s12)
    return float(np.mean(np.asarray(r) ** 2))


def elbo_estimate(params: VariationalParams, data, weights, cfg: ElboConfig,
                  rng: np.random.Generator, problem=None, model: ElboModel = None,
                  phase1: bool = False, **model_kwargs):
    """One stochastic (value, gradients) estimate of the ELBO.

    Pass a prebuilt ``model`` on hot paths; otherwise the operators are
    assembled from (problem, data, weights) on the fly.
    """
    if model is None:
        from .trainer import build_elbo_model

        if problem is None:
            raise ValueError("need either a prebuilt model or a problem")
        model = build_elbo_model(problem, data, weights, **model_kwargs)
    est = record_elbo(model, params, cfg, rng, phase1=phase1)
    return est.value, est.gradients
