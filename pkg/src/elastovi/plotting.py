"""Matplotlib figure rendering for the report command.

All figures go straight to PNG files (Agg backend, no display) with metadata
stripped so repeated runs produce byte-identical images.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

params = {
    "figure.dpi": 110,
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "legend.fontsize": 9,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "savefig.bbox": "tight",
}
plt.rcParams.update(params)

_SAVE_KW = {"metadata": {"Software": None}}


def _save(fig, path):
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_trace(trace_rows, path):
    """Training diagnostics: ELBO and held-out mean squared residual."""
    it = np.array([r.iteration for r in trace_rows])
    phase = np.array([r.phase for r in trace_rows])
    elbo = np.array([r.elbo for r in trace_rows])
    r2 = np.array([r.r2_heldout for r in trace_rows])
    # phase-2 iterations continue the axis after phase 1
    offset = it[phase == 1].max() + 1 if np.any(phase == 1) else 0
    x = np.where(phase == 2, it + offset, it)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(x, elbo, lw=0.8)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("ELBO estimate")
    ax2.semilogy(x[phase == 2], np.maximum(r2[phase == 2], 1e-300), lw=0.8)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel(r"held-out $\langle r^2 \rangle$")
    if np.any(phase == 2):
        for ax in (ax1, ax2):
            ax.axvline(offset, color="gray", ls=":", lw=0.8)
    _save(fig, path)


def plot_field_maps(mesh, mean, std, path, title="log-modulus"):
    """Posterior mean and standard deviation of an element-wise field."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    tri = mesh.elements
    for ax, vals, label in ((axes[0], mean, f"{title} mean"),
                            (axes[1], std, f"{title} std")):
        pc = ax.tripcolor(mesh.nodes[:, 0], mesh.nodes[:, 1], tri, facecolors=vals)
        ax.set_aspect("equal")
        ax.set_title(label)
        ax.set_xlabel(r"$s_1$")
        ax.set_ylabel(r"$s_2$")
        fig.colorbar(pc, ax=ax, fraction=0.046)
    _save(fig, path)


def plot_diagonal(points, summary, truth, path):
    """Cross-section along s1 = s2: mean, 95% band, ground truth."""
    s = points[:, 0]
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.fill_between(s, summary.q025, summary.q975, alpha=0.3, label="95% CI")
    ax.plot(s, summary.mean, lw=1.2, label="posterior mean")
    if truth is not None:
        ax.plot(s, truth, "r--", lw=1.0, label="ground truth")
    ax.set_xlabel(r"$s_1 = s_2$")
    ax.set_ylabel("log-modulus")
    ax.legend(loc="best")
    _save(fig, path)


def plot_displacement_maps(mesh, mean, std, path):
    """Nodal displacement posterior: mean and std per component."""
    fig, axes = plt.subplots(2, 2, figsize=(8.6, 7.2))
    xs, ys = mesh.nodes[:, 0], mesh.nodes[:, 1]
    panels = [
        (axes[0, 0], mean[0::2], r"$u_1$ mean"),
        (axes[0, 1], np.asarray(std[0::2]), r"$u_1$ std"),
        (axes[1, 0], mean[1::2], r"$u_2$ mean"),
        (axes[1, 1], np.asarray(std[1::2]), r"$u_2$ std"),
    ]
    for ax, vals, label in panels:
        pc = ax.tripcolor(xs, ys, mesh.elements, vals, shading="gouraud")
        ax.set_aspect("equal")
        ax.set_title(label)
        fig.colorbar(pc, ax=ax, fraction=0.046)
    _save(fig, path)


def plot_boundary_slices(slices, path):
    """Inferred displacements along the essential boundaries vs. truth.

    ``slices`` maps segment name -> dict with arrays s, mean, q025, q975 and
    optionally truth; one panel per (segment, component).
    """
    n = len(slices)
    fig, axes = plt.subplots(n, 2, figsize=(9, 2.8 * n), squeeze=False)
    for i, (segment, data) in enumerate(sorted(slices.items())):
        for c in (0, 1):
            ax = axes[i, c]
            ax.fill_between(data["s"], data["q025"][c], data["q975"][c],
                            alpha=0.3, label="95% CI")
            ax.plot(data["s"], data["mean"][c], lw=1.1, label="mean")
            if data.get("truth") is not None:
                ax.plot(data["s"], data["truth"][c], "r--", lw=1.0, label="truth")
            ax.set_title(f"$u_{c + 1}$ on {segment}")
            ax.set_xlabel("arc length")
            if i == 0 and c == 0:
                ax.legend(loc="best")
    _save(fig, path)
