"""Approximate posterior: low-rank Gaussians and the conditional-mean MLP.

The joint posterior factorizes as q(x, y) = q(x | y) q(y).  q(y) is Gaussian
with covariance L L^T + diag(sigma^2); q(x | y) shares that covariance form
but gets its mean from a fully connected network applied to y.  Standard
deviations are parameterized as exp(rho) to stay positive.

Sampling uses the reparameterization trick throughout so every draw is a
differentiable function of the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass
class LowRankGaussian:
    """Gaussian with covariance ``factor @ factor.T + diag(exp(rho)^2)``."""

    mean: np.ndarray
    factor: np.ndarray
    rho: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    @property
    def diag_std(self) -> np.ndarray:
        return np.exp(self.rho)

    def covariance(self) -> np.ndarray:
        return self.factor @ self.factor.T + np.diag(np.exp(2.0 * self.rho))

    @staticmethod
    def initial(dim: int, rank: int, sigma0: float = 1e-2) -> "LowRankGaussian":
        return LowRankGaussian(mean=np.zeros(dim),
                               factor=np.zeros((dim, rank)),
                               rho=np.full(dim, np.log(sigma0)))


def sample_lowrank(mean, factor, rho, eps_lr, eps_diag):
    """Reparameterized draw(s): mean + eps_lr @ factor.T + exp(rho) * eps_diag.

    ``eps_lr`` has the rank dimension last, ``eps_diag`` the full dimension;
    both may carry a leading batch axis.  Accepts arrays or tape Vars.
    """
    return mean + eps_lr @ ad.transpose(factor) + ad.exp(rho) * eps_diag


def sample_y(q_y: LowRankGaussian, eps1, eps2):
    """Draw y = mu + L eps1 + sigma * eps2 (plain numpy path)."""
    return np.asarray(sample_lowrank(q_y.mean, q_y.factor, q_y.rho, eps1, eps2))


@dataclass
class MLP:
    """Fully connected net: three SiLU hidden layers, linear output."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @staticmethod
    def initial(d_in: int, hidden: int, d_out: int, seed: int, n_hidden: int = 3) -> "MLP":
        """Variance-preserving init: W ~ N(0, 2/(fan_in+fan_out)), b = 0."""
        rng = np.random.default_rng(seed)
        widths = [d_in] + [hidden] * n_hidden + [d_out]
        weights, biases = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            std = np.sqrt(2.0 / (a + b))
            weights.append(rng.normal(0.0, std, size=(a, b)))
            biases.append(np.zeros(b))
        return MLP(weights=weights, biases=biases)

    def parameter_names(self):
        out = []
        for i in range(len(self.weights)):
            out.extend([f"w{i}", f"b{i}"])
        return out


def mlp_forward(params, y):
    """Apply the network; ``params`` alternates (W0, b0, W1, b1, ...).

    y may be a single vector, a batch of rows, or a tape Var.
    """
    h = y
    n_layers = len(params) // 2
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        h = h @ w + b
        if i < n_layers - 1:
            h = ad.silu(h)
    return h


@dataclass
class ConditionalGaussian:
    """q(x | y): MLP mean plus a y-independent low-rank covariance."""

    mlp: MLP
    factor: np.ndarray
    rho: np.ndarray

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    @staticmethod
    def initial(d_y: int, d_x: int, hidden: int, rank: int, seed: int,
                sigma0: float = 1e-2) -> "ConditionalGaussian":
        return ConditionalGaussian(mlp=MLP.initial(d_y, hidden, d_x, seed),
                                   factor=np.zeros((d_x, rank)),
                                   rho=np.full(d_x, np.log(sigma0)))

    def mean(self, y):
        params = []
        for w, b in zip(self.mlp.weights, self.mlp.biases):
            params.extend([w, b])
        return mlp_forward(params, y)


def sample_x_given_y(q_xy: ConditionalGaussian, y, eps3, eps4):
    """Draw x = mu(y) + L_x eps3 + sigma_x * eps4 (plain numpy path)."""
    mu = q_xy.mean(np.asarray(y, dtype=np.float64))
    return np.asarray(sample_lowrank(mu, q_xy.factor, q_xy.rho, eps3, eps4))


def logdet_lowrank(factor, sigma):
    """log det(L L^T + diag(sigma^2)) by the matrix determinant lemma.

    Costs O(d * rank^2); requires all sigma > 0.
    """
    factor = np.asarray(factor, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("diagonal standard deviations must be positive")
    r = factor.shape[1]
    core = np.eye(r) + (factor / sigma[:, None] ** 2).T @ factor
    return float(2.0 * np.sum(np.log(sigma)) + ad.logdet_spd(core))


def logdet_lowrank_on_tape(tape, factor_var, rho_var, rank: int):
    """Tape-recorded log det(L L^T + diag(exp(rho)^2)); returns a scalar Var."""
    inv_var = ad.exp(-2.0 * rho_var)
    scaled = factor_var * ad.reshape(inv_var, (-1, 1))
    core = ad.transpose(factor_var) @ scaled + tape.constant(np.eye(rank))
    return 2.0 * ad.total(rho_var) + ad.logdet_spd(core)
