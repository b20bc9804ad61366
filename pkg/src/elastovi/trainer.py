"""Two-phase stochastic variational training loop with cost accounting.

Phase 1 fits q(y) to the displacement observations alone (virtual likelihood
off); phase 2 turns the weighted residuals on and updates the joint
posterior, interleaving the closed-form Gamma update of the jump-prior
precisions with every gradient step.  Parameters follow ADAM ascent steps.

Cost is tracked as the number of single weighted-residual evaluations:
exactly K*L per phase-2 iteration (gradients ride along with their forward
evaluation).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import elbo as eb
from . import priors as pr
from .datagen import Dataset
from .elbo import (ElboConfig, ElboModel, VariationalParams, observation_operator,
                   record_elbo, selection_operator)
from .fem import dirichlet_arrays
from .mesh import jump_operator
from .residual import GradientOperator, ResidualOperator, ResidualProblem
from .variational import ConditionalGaussian, LowRankGaussian


@dataclass
class AdamState:
    """First/second moment accumulators for a list of parameter arrays."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @staticmethod
    def for_params(arrays, lr=1e-4, beta1=0.9, beta2=0.99, eps=1e-8) -> "AdamState":
        return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                         m=[np.zeros_like(a) for a in arrays],
                         v=[np.zeros_like(a) for a in arrays])


def adam_step(state: AdamState, params: list, grads: list) -> list:
    """One ADAM ascent step; returns the updated parameter arrays."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in ADAM step")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p + state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


@dataclass
class CostCounter:
    """Monotone count of single weighted-residual evaluations."""

    residual_evals: int = 0

    def add(self, n: int):
        if n < 0:
            raise ValueError("cost increments must be nonnegative")
        self.residual_evals += int(n)


@dataclass
class TrainConfig:
    lam: float = 1e7
    K: int = 200
    L: int = 10
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    iters_phase1: int = 5000
    iters_phase2: int = 20000
    seed: int = 0
    log_every: int = 100
    heldout_samples: int = 50
    early_stop_rel: float = 0.0  # 0 disables the relative-change stop
    early_stop_window: int = 1000


@dataclass
class TraceRow:
    iteration: int
    phase: int
    elbo: float
    r2_heldout: float
    residual_evals: int


@dataclass
class Checkpoint:
    """Everything needed to resume or post-process a training run."""

    config: dict
    params: VariationalParams
    jump: pr.JumpPrior
    counter: CostCounter
    trace: list
    dirichlet_given: bool
    aborted: bool = False


def build_elbo_model(problem: ResidualProblem, dataset: Dataset, weights,
                     y_variance: float = pr.DEFAULT_Y_VARIANCE,
                     a0: float = pr.DEFAULT_A0, b0: float = pr.DEFAULT_B0,
                     dirichlet_given: bool = True,
                     x_prior_sigma: float = None) -> ElboModel:
    """Assemble the precomputed operators for one inference problem."""
    mesh = problem.mesh
    obs_op = observation_operator(mesh, dataset.obs_points)
    jump = pr.JumpPrior(B=jump_operator(mesh), a0=a0, b0=b0)
    select_op = None
    fixed = None
    if dirichlet_given:
        mask, vals = dirichlet_arrays(problem)
        select_op = selection_operator(mask)
        fixed = vals * mask
    return ElboModel(problem=problem,
                     grad_op=GradientOperator(mesh),
                     residual_op=ResidualOperator(problem, weights),
                     obs_op=obs_op,
                     u_hat=np.asarray(dataset.u_hat, dtype=np.float64),
                     tau=float(dataset.tau),
                     y_prior_variance=y_variance,
                     jump=jump,
                     select_op=select_op,
                     fixed_values=fixed,
                     x_prior_sigma=x_prior_sigma)


def initial_params(model: ElboModel, d_x: int, hidden: int, rank_x: int,
                   rank_y: int, seed: int) -> VariationalParams:
    d_y_free = model.d_y_free
    d_y_full = model.problem.mesh.n_dofs
    q_y = LowRankGaussian.initial(d_y_free, rank_y)
    q_xy = ConditionalGaussian.initial(d_y_full, d_x, hidden, rank_x, seed)
    mlp_params = []
    for w, b in zip(q_xy.mlp.weights, q_xy.mlp.biases):
        mlp_params.extend([w, b])
    return VariationalParams(mu_y=q_y.mean, factor_y=q_y.factor, rho_y=q_y.rho,
                             mlp_params=mlp_params,
                             factor_x=q_xy.factor, rho_x=q_xy.rho)


def train(model: ElboModel, params: VariationalParams, cfg: TrainConfig,
          trace_path: str = None) -> Checkpoint:
    """Run phase 1 then phase 2; returns the final checkpoint.

    On a non-finite ELBO or gradient the loop aborts but still returns a
    checkpoint (flagged ``aborted``) for post-mortem inspection.
    """
    ss = np.random.SeedSequence(cfg.seed)
    child = ss.spawn(2)
    rng = np.random.default_rng(child[0])
    rng_heldout = np.random.default_rng(child[1])

    counter = CostCounter()
    trace = []
    aborted = False

    def log_row(it, phase, value):
        r2 = eb.mean_squared_residual(model, params, cfg.heldout_samples, rng_heldout)
        trace.append(TraceRow(it, phase, value, r2, counter.residual_evals))

    elbo_cfg1 = ElboConfig(lam=0.0, tau=model.tau, K=max(cfg.K, 1), L=cfg.L)
    adam1 = AdamState.for_params(params.y_arrays(), lr=cfg.lr,
                                 beta1=cfg.beta1, beta2=cfg.beta2)
    try:
        for it in range(cfg.iters_phase1):
            est = record_elbo(model, params, elbo_cfg1, rng, phase1=True)
            new = adam_step(adam1, params.y_arrays(), est.gradients)
            params.mu_y, params.factor_y, params.rho_y = new
            if it % cfg.log_every == 0:
                log_row(it, 1, est.value)

        elbo_cfg2 = ElboConfig(lam=cfg.lam, tau=model.tau, K=cfg.K, L=cfg.L)
        adam2 = AdamState.for_params(params.all_arrays(), lr=cfg.lr,
                                     beta1=cfg.beta1, beta2=cfg.beta2)
        recent = []
        for it in range(cfg.iters_phase2):
            est = record_elbo(model, params, elbo_cfg2, rng)
            params.set_arrays(adam_step(adam2, params.all_arrays(), est.gradients))
            counter.add(cfg.K * cfg.L)
            if model.x_prior_sigma is None:
                # closed-form coordinate update of the jump precisions,
                # fed by the iteration's own posterior samples
                model.jump.update(est.x_samples)
            if it % cfg.log_every == 0:
                log_row(it, 2, est.value)
            if cfg.early_stop_rel > 0:
                recent.append(est.value)
                if len(recent) > 2 * cfg.early_stop_window:
                    recent = recent[-2 * cfg.early_stop_window:]
                    old = np.mean(recent[:cfg.early_stop_window])
                    new_m = np.mean(recent[cfg.early_stop_window:])
                    if abs(new_m - old) <= cfg.early_stop_rel * abs(old):
                        log_row(it, 2, est.value)
                        break
    except FloatingPointError:
        aborted = True

    ckpt = Checkpoint(config={}, params=params, jump=model.jump, counter=counter,
                      trace=trace, dirichlet_given=model.select_op is not None,
                      aborted=aborted)
    if trace_path:
        write_trace(trace_path, trace)
    return ckpt


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "phase", "elbo", "r2_heldout", "residual_evals"])
        for row in trace:
            w.writerow([row.iteration, row.phase, repr(row.elbo),
                        repr(row.r2_heldout), row.residual_evals])
