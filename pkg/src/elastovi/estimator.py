"""Posterior predictive sampling of the material field and summary statistics.

Each sample draws y from q(y), runs the conditional-mean network, draws x
from q(x | y), and reads the piecewise-constant field at the query points.
Summaries report the sample mean, the 1/B-normalized variance, and the 2.5% /
97.5% quantiles via linear interpolation between order statistics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .elbo import ElboModel, VariationalParams, sample_xy


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    variance: np.ndarray
    q025: np.ndarray
    q975: np.ndarray
    n_samples: int


def draw_samples(model: ElboModel, params: VariationalParams, B: int, seed: int,
                 zero_noise: bool = False):
    """(X, Y) posterior draws, B rows each; zero_noise collapses to the means."""
    if B < 1:
        raise ValueError("need at least one sample")
    if zero_noise:
        rng = _ZeroRng()
    else:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
    return sample_xy(model, params, B, rng)


class _ZeroRng:
    """Stands in for a Generator when all reparameterization noise is zeroed."""

    def standard_normal(self, shape):
        return np.zeros(shape)


def posterior_field_samples(model: ElboModel, params: VariationalParams,
                            query_points, B: int, seed: int,
                            zero_noise: bool = False) -> np.ndarray:
    """(B, n_query) samples of the material field at the query points."""
    pts = np.atleast_2d(np.asarray(query_points, dtype=np.float64))
    elems = model.problem.mesh.containing_elements(pts)
    x, _ = draw_samples(model, params, B, seed, zero_noise)
    return x[:, elems]


def posterior_displacement_samples(model: ElboModel, params: VariationalParams,
                                   B: int, seed: int) -> np.ndarray:
    """(B, n_dofs) samples of the nodal displacement coefficients."""
    _, y = draw_samples(model, params, B, seed)
    return y


def summarize(samples: np.ndarray, axis: int = 0) -> PosteriorSummary:
    """Mean / variance / central 95% interval over the sample axis.

    The variance uses the plain 1/B normalization and the quantiles linear
    interpolation between order statistics.
    """
    samples = np.asarray(samples, dtype=np.float64)
    B = samples.shape[axis]
    if B < 2:
        raise ValueError("need at least two samples to summarize")
    mean = samples.mean(axis=axis)
    variance = np.mean((samples - np.expand_dims(mean, axis)) ** 2, axis=axis)
    q025 = np.quantile(samples, 0.025, axis=axis)
    q975 = np.quantile(samples, 0.975, axis=axis)
    return PosteriorSummary(mean=mean, variance=variance, q025=q025, q975=q975,
                            n_samples=B)


def diagonal_points(n: int = 201) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    return np.column_stack([t, t])


def write_posterior_csv(path, points, summary: PosteriorSummary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s1", "s2", "mean", "var", "q025", "q975"])
        for p, m, v, lo, hi in zip(points, summary.mean, summary.variance,
                                   summary.q025, summary.q975):
            w.writerow([repr(p[0]), repr(p[1]), repr(m), repr(v), repr(lo), repr(hi)])


def write_diagonal_csv(path, points, summary: PosteriorSummary, truth=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["s", "mean", "var", "q025", "q975"]
        if truth is not None:
            header.append("truth")
        w.writerow(header)
        for i, p in enumerate(points):
            row = [repr(p[0]), repr(summary.mean[i]), repr(summary.variance[i]),
                   repr(summary.q025[i]), repr(summary.q975[i])]
            if truth is not None:
                row.append(repr(truth[i]))
            w.writerow(row)
