"""Black-box comparison methods: HMC and mean-field SVI over forward solves.

Both treat the linear FEM solver as a black box: each log-posterior gradient
costs one forward solve plus one adjoint solve.  For cost comparisons the
counter books fixed residual-evaluation equivalents per solve: a warm-started
iterative solve inside HMC is worth 220 updates x 2048 residuals = 450,560,
a cold-started one inside SVI 4400 x 2048 = 9,011,200.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .elbo import observation_operator
from .fem import (SingularSystemError, adjoint_gradient_linear, assemble_load,
                  assemble_stiffness, dirichlet_arrays, _solve_reduced)
from .residual import ResidualProblem
from .trainer import CostCounter

HMC_EQUIV_PER_SOLVE = 450_560
SVI_EQUIV_PER_SOLVE = 9_011_200


class BlackboxPosterior:
    """log p(x | data) up to a constant, with exact adjoint gradients.

    Prior: independent N(0, prior_sigma^2) on each log-modulus coefficient.
    Only the linear constitutive law is supported.
    """

    def __init__(self, problem: ResidualProblem, dataset, prior_sigma: float = 2.0,
                 counter: CostCounter = None, equiv_per_solve: int = HMC_EQUIV_PER_SOLVE):
        if problem.law != "linear":
            raise ValueError("black-box baselines support the linear law only")
        mask, _ = dirichlet_arrays(problem)
        if not mask.any():
            raise SingularSystemError(
                "empty Dirichlet boundary: black-box methods need a well-posed "
                "forward problem")
        self.problem = problem
        self.H = observation_operator(problem.mesh, dataset.obs_points)
        self.u_hat = np.asarray(dataset.u_hat, dtype=np.float64)
        self.tau = float(dataset.tau)
        self.prior_sigma = prior_sigma
        self.counter = counter if counter is not None else CostCounter()
        self.equiv_per_solve = equiv_per_solve
        self.n_solves = 0

    def _forward(self, x):
        mask, vals = dirichlet_arrays(self.problem)
        K = assemble_stiffness(self.problem, x)
        f = assemble_load(self.problem)
        free = ~mask
        rhs = f[free] - K[free][:, mask] @ vals[mask]
        y = vals.copy()
        y[free] = _solve_reduced(K, rhs, free)
        self.n_solves += 1
        self.counter.add(self.equiv_per_solve)
        return y, K

    def __call__(self, x):
        """Returns (log posterior, gradient w.r.t. x).

        Physically absurd log-moduli (|x| > 40, i.e. moduli beyond 1e17)
        report -inf so samplers treat the proposal as divergent instead of
        crashing the solver.
        """
        x = np.asarray(x, dtype=np.float64)
        if np.max(np.abs(x)) > 40.0:
            return -np.inf, np.zeros_like(x)
        y, K = self._forward(x)
        resid = self.u_hat - self.H @ y
        log_like = -0.5 * self.tau * float(resid @ resid)
        dl_dy = self.tau * (self.H.T @ resid)
        grad_like = adjoint_gradient_linear(self.problem, x, dl_dy, y=y, K=K)
        log_prior = -0.5 * float(x @ x) / self.prior_sigma ** 2
        grad_prior = -x / self.prior_sigma ** 2
        return log_like + log_prior, grad_like + grad_prior


def blackbox_log_posterior(x, dataset, problem: ResidualProblem,
                           prior_sigma: float = 2.0):
    """One-shot evaluation of the black-box log posterior and its gradient."""
    return BlackboxPosterior(problem, dataset, prior_sigma)(x)


@dataclass
class HmcResult:
    chain: np.ndarray
    accept_rate: float
    step_size: float
    n_divergent: int
    counter: CostCounter = field(default=None)


def hmc_sample(log_post, x0, steps: int, leapfrog_steps: int = 10,
               step_size: float = None, seed: int = 0, warmup: int = None,
               target_accept: float = 0.65) -> HmcResult:
    """Leapfrog HMC with Metropolis correction.

    When ``step_size`` is None a dual-averaging warmup (Nesterov-style primal
    averaging on log step size) tunes it to the target acceptance rate.
    Divergent trajectories (energy error > 1000) are always rejected and
    counted.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x0, dtype=np.float64).copy()
    lp, grad = log_post(x)
    d = x.size

    if warmup is None:
        warmup = steps // 2 if step_size is None else 0
    eps = step_size if step_size is not None else 0.1 / d ** 0.25
    # dual-averaging state
    mu = np.log(10.0 * eps)
    log_eps_bar, h_bar = 0.0, 0.0
    gamma, t0, kappa = 0.05, 10.0, 0.75

    chain = np.empty((steps, d))
    n_accept = 0
    n_div = 0

    for m in range(warmup + steps):
        p = rng.standard_normal(d)
        h0 = -lp + 0.5 * p @ p
        x_new, lp_new, grad_new = x, lp, grad
        p_new = p - 0.5 * eps * (-grad)
        diverged = False
        for l in range(leapfrog_steps):
            x_new = x_new + eps * p_new
            try:
                lp_new, grad_new = log_post(x_new)
            except (FloatingPointError, ArithmeticError, SingularSystemError):
                diverged = True
                break
            if not np.isfinite(lp_new):
                diverged = True
                break
            if l < leapfrog_steps - 1:
                p_new = p_new - eps * (-grad_new)
        if not diverged:
            p_new = p_new - 0.5 * eps * (-grad_new)
            h1 = -lp_new + 0.5 * p_new @ p_new
            d_energy = h1 - h0
            diverged = not np.isfinite(d_energy) or d_energy > 1000.0
        if diverged:
            accept_prob = 0.0
        else:
            accept_prob = 1.0 if d_energy <= 0 else float(np.exp(-d_energy))
        if (not diverged) and rng.uniform() < accept_prob:
            x, lp, grad = x_new, lp_new, grad_new
            accepted = True
        else:
            accepted = False
        if diverged and m >= warmup:  # step-size exploration diverges benignly
            n_div += 1

        if m < warmup and step_size is None:
            frac = 1.0 / (m + 1 + t0)
            h_bar = (1.0 - frac) * h_bar + frac * (target_accept - accept_prob)
            log_eps = mu - np.sqrt(m + 1.0) / gamma * h_bar
            w = (m + 1.0) ** -kappa
            log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar
            eps = float(np.exp(log_eps))
            if m == warmup - 1:
                eps = float(np.exp(log_eps_bar))
        elif m >= warmup:
            chain[m - warmup] = x
            n_accept += int(accepted)

    return HmcResult(chain=chain, accept_rate=n_accept / steps, step_size=eps,
                     n_divergent=n_div)


@dataclass
class MeanFieldGaussian:
    mu: np.ndarray
    sigma: np.ndarray


def blackbox_svi(log_post, init, iters: int, lr: float = 0.05, n_mc: int = 1,
                 seed: int = 0, sigma0=0.1,
                 average_last: int = 0) -> MeanFieldGaussian:
    """Reparameterized mean-field Gaussian fit by ADAM ascent on the ELBO.

    ``average_last`` > 0 returns the tail average of the iterates (Polyak
    averaging), which removes most of the stationary stochastic wander.
    """
    rng = np.random.default_rng(seed)
    mu = np.asarray(init, dtype=np.float64).copy()
    rho = np.broadcast_to(np.log(np.asarray(sigma0, dtype=np.float64)),
                          mu.shape).copy()
    m = [np.zeros_like(mu), np.zeros_like(rho)]
    v = [np.zeros_like(mu), np.zeros_like(rho)]
    b1, b2, eps_adam = 0.9, 0.99, 1e-8
    mu_acc = np.zeros_like(mu)
    rho_acc = np.zeros_like(rho)
    n_acc = 0
    for t in range(1, iters + 1):
        sigma = np.exp(rho)
        g_mu = np.zeros_like(mu)
        g_rho = np.zeros_like(rho)
        for _ in range(n_mc):
            z = rng.standard_normal(mu.shape)
            value, grad = log_post(mu + sigma * z)
            if not np.isfinite(value):
                raise FloatingPointError("non-finite ELBO sample in black-box SVI")
            g_mu += grad / n_mc
            g_rho += grad * sigma * z / n_mc
        g_rho += 1.0  # entropy: d/drho sum(rho) = 1
        for i, (p, g) in enumerate(((mu, g_mu), (rho, g_rho))):
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            p += lr * (m[i] / (1 - b1 ** t)) / (np.sqrt(v[i] / (1 - b2 ** t)) + eps_adam)
        if average_last and t > iters - average_last:
            mu_acc += mu
            rho_acc += rho
            n_acc += 1
    if n_acc:
        return MeanFieldGaussian(mu=mu_acc / n_acc, sigma=np.exp(rho_acc / n_acc))
    return MeanFieldGaussian(mu=mu, sigma=np.exp(rho))


def _autocorrelation(x: np.ndarray) -> np.ndarray:
    n = x.size
    f = np.fft.rfft(x - x.mean(), 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    return acf / np.arange(n, 0, -1)


def effective_sample_size(chain: np.ndarray) -> np.ndarray:
    """Per-coordinate ESS via Geyer's initial positive sequence."""
    chain = np.asarray(chain, dtype=np.float64)
    if chain.ndim == 1:
        chain = chain[:, None]
    n, d = chain.shape
    out = np.empty(d)
    for j in range(d):
        acf = _autocorrelation(chain[:, j])
        if acf[0] <= 0:
            out[j] = float(n)
            continue
        rho = acf / acf[0]
        s = 0.0
        for k in range(1, n // 2):
            pair = rho[2 * k - 1] + rho[2 * k] if 2 * k < n else rho[2 * k - 1]
            if pair < 0:
                break
            s += pair
        out[j] = n / (1.0 + 2.0 * s)
    return out


def write_chain_csv(path, chain: np.ndarray):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(chain.shape[1])])
        for row in chain:
            w.writerow([repr(v) for v in row])
