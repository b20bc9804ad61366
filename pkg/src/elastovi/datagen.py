"""Synthetic-data pipeline: ground-truth field, fine-mesh solve, noisy grid.

Data is always generated on a refined mesh (default 2x the inversion mesh)
and interpolated to the observation grid, so inversion never sees its own
discretization.  Noise follows the configured signal-to-noise ratio:

    SNR_dB = 10 log10 sqrt( tau * mean(u_ref^2) )   =>   tau = 10^(SNR/5) / mean(u_ref^2)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .elbo import observation_operator
from .fem import solve_forward
from .mesh import Mesh, build_structured_mesh
from .residual import ResidualProblem, standard_problem

INCLUSION_LARGE = ((0.7, 0.7), 0.2, 1.6)
INCLUSION_SMALL = ((0.35, 0.35), 0.15, 1.1)


@dataclass
class Dataset:
    """Noisy displacement observations plus the metadata to reproduce them."""

    obs_points: np.ndarray
    u_hat: np.ndarray
    tau: float
    snr_db: float
    seed: int
    mesh_info: dict = field(default_factory=dict)
    u_ref: np.ndarray = None
    u_ref_nodes: np.ndarray = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("observation precision tau must be positive")
        if self.u_hat.shape[0] != 2 * self.obs_points.shape[0]:
            raise ValueError("need both displacement components per grid point")


def ground_truth_field(points) -> np.ndarray:
    """Log-modulus of the two-inclusion phantom, vectorized over points."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.zeros(pts.shape[0])
    for (cx, cy), r, val in (INCLUSION_LARGE, INCLUSION_SMALL):
        inside = (pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2 < r * r
        out[inside] = val
    return out if np.asarray(points).ndim > 1 else float(out[0])


def snr_to_tau(snr_db: float, u_ref) -> float:
    """Observation precision matching a target SNR in dB."""
    u_ref = np.asarray(u_ref, dtype=np.float64)
    mean_sq = float(np.mean(u_ref ** 2))
    if mean_sq == 0.0:
        raise ValueError("reference field is identically zero")
    return 10.0 ** (snr_db / 5.0) / mean_sq


def tau_to_snr(tau: float, u_ref) -> float:
    return 10.0 * np.log10(np.sqrt(tau * np.mean(np.asarray(u_ref) ** 2)))


def observation_grid(grid_n: int) -> np.ndarray:
    """Regular grid_n x grid_n grid over the unit square, row-major."""
    xs = np.linspace(0.0, 1.0, grid_n)
    return np.column_stack([np.tile(xs, grid_n), np.repeat(xs, grid_n)])


def refined_problem(problem: ResidualProblem, refine: int) -> ResidualProblem:
    """Same physics on a mesh with ``refine``-times finer cells."""
    mesh = problem.mesh
    nx = refine * (mesh.nx - 1) + 1
    ny = refine * (mesh.ny - 1) + 1
    fine = build_structured_mesh(nx, ny)
    return ResidualProblem(mesh=fine, law=problem.law, nu=problem.nu,
                           tractions=problem.tractions,
                           dirichlet_segments=problem.dirichlet_segments,
                           dirichlet_values=problem.dirichlet_values)


def compute_reference(problem: ResidualProblem, grid_n: int, refine: int = 2,
                      truth_fn=ground_truth_field):
    """Fine-mesh forward solve and its interpolation to the observation grid.

    Returns (obs_points, u_ref, fine_problem, y_fine).
    """
    fine = refined_problem(problem, refine) if refine > 1 else problem
    x_true = truth_fn(fine.mesh.centroids())
    y_fine = solve_forward(fine, x_true)
    pts = observation_grid(grid_n)
    H = observation_operator(fine.mesh, pts)
    return pts, H @ y_fine, fine, y_fine


def inject_noise(u_ref: np.ndarray, tau: float, rng: np.random.Generator) -> np.ndarray:
    return u_ref + rng.standard_normal(u_ref.shape) / np.sqrt(tau)


def make_dataset(problem: ResidualProblem, grid_n: int, snr_db: float, seed: int,
                 refine: int = 2, noiseless: bool = False,
                 truth_fn=ground_truth_field) -> Dataset:
    """Generate one synthetic dataset; deterministic per seed."""
    pts, u_ref, fine, y_fine = compute_reference(problem, grid_n, refine, truth_fn)
    tau = snr_to_tau(snr_db, u_ref)
    if noiseless:
        u_hat = u_ref.copy()
    else:
        u_hat = inject_noise(u_ref, tau, np.random.default_rng(seed))
    H_nodes = observation_operator(fine.mesh, problem.mesh.nodes)
    return Dataset(obs_points=pts, u_hat=u_hat, tau=tau, snr_db=snr_db, seed=seed,
                   mesh_info={"nx": fine.mesh.nx, "ny": fine.mesh.ny,
                              "refine": refine, "inverse_nx": problem.mesh.nx,
                              "inverse_ny": problem.mesh.ny},
                   u_ref=u_ref, u_ref_nodes=H_nodes @ y_fine)


def dataset_to_json(ds: Dataset) -> str:
    payload = {
        "obs_points": ds.obs_points.tolist(),
        "u_hat": ds.u_hat.tolist(),
        "tau": ds.tau,
        "snr_db": ds.snr_db,
        "seed": ds.seed,
        "mesh": ds.mesh_info,
        "u_ref": ds.u_ref.tolist() if ds.u_ref is not None else None,
        "u_ref_nodes": ds.u_ref_nodes.tolist() if ds.u_ref_nodes is not None else None,
    }
    return json.dumps(payload, indent=1, sort_keys=True)


def dataset_from_json(text: str) -> Dataset:
    d = json.loads(text)
    return Dataset(obs_points=np.asarray(d["obs_points"], dtype=np.float64),
                   u_hat=np.asarray(d["u_hat"], dtype=np.float64),
                   tau=float(d["tau"]), snr_db=float(d["snr_db"]),
                   seed=int(d["seed"]), mesh_info=d.get("mesh", {}),
                   u_ref=None if d.get("u_ref") is None else np.asarray(d["u_ref"]),
                   u_ref_nodes=(None if d.get("u_ref_nodes") is None
                                else np.asarray(d["u_ref_nodes"])))
