"""Small Galerkin FEM solver on the structured mesh family.

Used only to generate synthetic ground-truth data and to drive the black-box
baselines; the inference engine never calls it.  Dirichlet conditions are
imposed by row/column elimination; the linear systems are solved with
diagonally preconditioned conjugate gradients.

The weak form matches the residual module exactly (same per-triangle closed
forms, same trapezoid traction integrals), so the FEM solution zeroes every
Galerkin weighted residual to solver precision.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import autodiff as ad
from .constitutive import stress_components
from .mesh import all_shape_gradients, boundary_edges
from .residual import (GradientOperator, ResidualOperator, ResidualProblem,
                       WeightFunction, element_stresses)

CG_TOL = 1e-12


class SingularSystemError(RuntimeError):
    """The assembled system is singular (e.g. no Dirichlet boundary)."""


def _plane_strain_d(nu):
    # Voigt (11, 22, 12) elasticity matrix for E = 1; scaled by exp(m) later
    mu = 1.0 / (2.0 * (1.0 + nu))
    lam = nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return np.array([
        [lam + 2 * mu, lam, 0.0],
        [lam, lam + 2 * mu, 0.0],
        [0.0, 0.0, mu],
    ])


def element_stiffness_blocks(problem: ResidualProblem, x):
    """Per-element 6x6 stiffness blocks for the linear law, K_e ~ exp(x_e)."""
    mesh = problem.mesh
    grads, areas = all_shape_gradients(mesh)
    D = _plane_strain_d(problem.nu)
    # Voigt strain-displacement matrix per element: rows (e11, e22, 2*e12)
    B = np.zeros((mesh.n_elements, 3, 6))
    for k in range(3):
        B[:, 0, 2 * k] = grads[:, k, 0]
        B[:, 1, 2 * k + 1] = grads[:, k, 1]
        B[:, 2, 2 * k] = grads[:, k, 1]
        B[:, 2, 2 * k + 1] = grads[:, k, 0]
    scale = areas * np.exp(np.asarray(x, dtype=np.float64))
    return np.einsum("e,eij,jk,ekl->eil", scale, B.transpose(0, 2, 1), D, B)


def element_dof_indices(mesh):
    """(n_elements, 6) global DOF indices in local node order."""
    tri = mesh.elements
    dofs = np.empty((mesh.n_elements, 6), dtype=np.int64)
    dofs[:, 0::2] = 2 * tri
    dofs[:, 1::2] = 2 * tri + 1
    return dofs


def assemble_stiffness(problem: ResidualProblem, x) -> sp.csr_matrix:
    """Global stiffness matrix K(x) for the linear law."""
    mesh = problem.mesh
    ke = element_stiffness_blocks(problem, x)
    dofs = element_dof_indices(mesh)
    rows = np.repeat(dofs, 6, axis=1).reshape(-1)
    cols = np.tile(dofs, (1, 6)).reshape(-1)
    K = sp.csr_matrix((ke.reshape(-1), (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs))
    K.sum_duplicates()
    return K


def assemble_load(problem: ResidualProblem) -> np.ndarray:
    """Consistent traction load vector (trapezoid rule on boundary edges)."""
    mesh = problem.mesh
    f = np.zeros(mesh.n_dofs)
    for segment, g in problem.tractions.items():
        edges = boundary_edges(mesh, segment)
        lengths = np.linalg.norm(mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]], axis=1)
        for (a, b), le in zip(edges, lengths):
            for c in (0, 1):
                f[2 * a + c] += 0.5 * le * g[c]
                f[2 * b + c] += 0.5 * le * g[c]
    return f


def dirichlet_arrays(problem: ResidualProblem):
    """(mask, values) over all DOFs for the prescribed displacements.

    ``dirichlet_values`` may be a scalar or a full per-DOF array.
    """
    mask = problem.dirichlet_dof_mask()
    dv = problem.dirichlet_values
    if np.isscalar(dv):
        vals = np.full(problem.mesh.n_dofs, float(dv))
    else:
        vals = np.asarray(dv, dtype=np.float64).copy()
        if vals.shape != (problem.mesh.n_dofs,):
            raise ValueError("per-DOF Dirichlet values must cover every DOF")
    vals[~mask] = 0.0
    return mask, vals


def _solve_reduced(K, rhs, free):
    Kff = K[free][:, free].tocsr()
    diag = Kff.diagonal()
    if np.any(diag <= 0):
        raise SingularSystemError("non-positive diagonal in reduced stiffness")
    M = sp.diags(1.0 / diag)
    yf, info = spla.cg(Kff, rhs, rtol=CG_TOL, atol=0.0, maxiter=20 * rhs.size, M=M)
    if info != 0:
        raise SingularSystemError(f"conjugate gradients failed to converge (info={info})")
    return yf


def assemble_and_solve_linear(problem: ResidualProblem, x) -> np.ndarray:
    """Nodal displacements solving K(x) y = f with Dirichlet elimination."""
    if problem.law != "linear":
        raise ValueError("assemble_and_solve_linear requires the linear law")
    mask, vals = dirichlet_arrays(problem)
    if not mask.any():
        raise SingularSystemError("empty Dirichlet boundary: the forward problem is ill-posed")
    K = assemble_stiffness(problem, x)
    f = assemble_load(problem)
    free = ~mask
    rhs = f[free] - K[free][:, mask] @ vals[mask]
    y = vals.copy()
    y[free] = _solve_reduced(K, rhs, free)
    return y


def adjoint_gradient_linear(problem: ResidualProblem, x, objective_grad_wrt_y,
                            y=None, K=None):
    """Gradient dJ/dx through the linear solve, by the adjoint method.

    ``objective_grad_wrt_y`` is dJ/dy at the solution; entries on Dirichlet
    DOFs are ignored (the solution there is fixed).  Passing a precomputed
    (y, K) pair skips the forward solve.
    """
    mask, vals = dirichlet_arrays(problem)
    if not mask.any():
        raise SingularSystemError("empty Dirichlet boundary: the forward problem is ill-posed")
    if K is None:
        K = assemble_stiffness(problem, x)
    if y is None:
        f = assemble_load(problem)
        free = ~mask
        rhs = f[free] - K[free][:, mask] @ vals[mask]
        y = vals.copy()
        y[free] = _solve_reduced(K, rhs, free)
    free = ~mask
    lam = np.zeros(problem.mesh.n_dofs)
    lam[free] = _solve_reduced(K, np.asarray(objective_grad_wrt_y)[free], free)
    # K is linear in exp(x_e), so dK/dx_e is the element block itself
    ke = element_stiffness_blocks(problem, x)
    dofs = element_dof_indices(problem.mesh)
    ye = y[dofs]
    le = lam[dofs]
    return -np.einsum("ei,eij,ej->e", le, ke, ye)


def _stress_jacobian(problem: ResidualProblem, x, g_components):
    """Per-element d(sigma)/d(grad u): rows (s11, s22, s12), cols (g11, g12, g21, g22).

    Assembled by three vectorized backward passes through the stress law on
    the autodiff tape (one per independent stress component).
    """
    n_e = problem.mesh.n_elements
    T = np.empty((n_e, 3, 4))
    for row in range(3):
        tape = ad.Tape()
        gs = [tape.input(g) for g in g_components]
        s = stress_components(problem.law, *gs, tape.constant(x), problem.nu)
        tape.mark_output(ad.total(s[row]))
        grads = tape.backward()
        for col in range(4):
            T[:, row, col] = grads[col]
    return T


def tangent_matrix(problem: ResidualProblem, x, y) -> sp.csr_matrix:
    """Consistent tangent dR/dy of the nodal weighted-residual vector."""
    mesh = problem.mesh
    grads, areas = all_shape_gradients(mesh)
    grad_op = GradientOperator(mesh)
    g = [np.asarray(v) for v in grad_op.apply(np.asarray(y, dtype=np.float64))]
    T = _stress_jacobian(problem, np.asarray(x, dtype=np.float64), g)
    # expand rows (s11, s22, s12) to the full 2x2 stress: sigma_cb
    full = np.empty((mesh.n_elements, 2, 2, 2, 2))
    comp_of = {(0, 0): 0, (1, 1): 1, (0, 1): 2, (1, 0): 2}
    for (c, b), row in comp_of.items():
        full[:, c, b] = T[:, row].reshape(mesh.n_elements, 2, 2)
    # K_e[(n,c),(m,d)] = A_e * sum_{b,q} dsigma_cb/dg_dq * dphi_n/ds_b * dphi_m/ds_q
    ke = np.einsum("e,ecbdq,enb,emq->encmd", areas, full, grads, grads)
    ke = ke.reshape(mesh.n_elements, 6, 6)
    dofs = element_dof_indices(mesh)
    rows = np.repeat(dofs, 6, axis=1).reshape(-1)
    cols = np.tile(dofs, (1, 6)).reshape(-1)
    Kt = sp.csr_matrix((ke.reshape(-1), (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs))
    Kt.sum_duplicates()
    return Kt


def nodal_weight_functions(problem: ResidualProblem):
    """One single-node weight function per free DOF (Galerkin test set)."""
    mask = problem.dirichlet_node_mask()
    out = []
    for n in range(problem.mesh.n_nodes):
        if mask[n]:
            continue
        for c in (1, 2):
            out.append(WeightFunction(nodes=np.array([n]), component=c,
                                      center=problem.mesh.nodes[n].copy(), radius=0.0))
    return out


def galerkin_residual_vector(problem: ResidualProblem, x, y,
                             op: ResidualOperator = None,
                             grad_op: GradientOperator = None) -> np.ndarray:
    """All nodal weighted residuals at (x, y); zero at a discrete solution."""
    if op is None:
        op = ResidualOperator(problem, nodal_weight_functions(problem))
    if grad_op is None:
        grad_op = GradientOperator(problem.mesh)
    s11, s22, s12 = element_stresses(problem, x, y, grad_op)
    return np.asarray(op.apply(s11, s22, s12))


def solve_neohookean(problem: ResidualProblem, x, newton_tol: float = 1e-9,
                     max_iters: int = 30) -> np.ndarray:
    """Newton solve of the Neo-Hookean weak form, tangent from the stress law.

    Converged when max |r_w| <= newton_tol over the Galerkin test set.
    """
    mask, vals = dirichlet_arrays(problem)
    if not mask.any():
        raise SingularSystemError("empty Dirichlet boundary: the forward problem is ill-posed")
    mesh = problem.mesh
    weights = nodal_weight_functions(problem)
    op = ResidualOperator(problem, weights)
    grad_op = GradientOperator(mesh)
    free_dofs = _free_dof_order(problem)

    y = vals.copy()
    for _ in range(max_iters):
        r = galerkin_residual_vector(problem, x, y, op, grad_op)
        if np.max(np.abs(r)) <= newton_tol:
            return y
        Kt = tangent_matrix(problem, x, y)
        Kt_ff = Kt[free_dofs][:, free_dofs].tocsc()
        dy = spla.spsolve(Kt_ff, -r)
        step = 1.0
        base = np.linalg.norm(r)
        for _ in range(30):
            y_try = y.copy()
            y_try[free_dofs] += step * dy
            try:
                r_try = galerkin_residual_vector(problem, x, y_try, op, grad_op)
            except Exception:
                step *= 0.5
                continue
            if np.linalg.norm(r_try) < base or step < 1e-6:
                break
            step *= 0.5
        y = y_try
    r = galerkin_residual_vector(problem, x, y, op, grad_op)
    if np.max(np.abs(r)) <= newton_tol:
        return y
    raise RuntimeError(f"Newton did not converge: max |r| = {np.max(np.abs(r)):.3e}")


def _free_dof_order(problem: ResidualProblem) -> np.ndarray:
    """Free DOF indices ordered like :func:`nodal_weight_functions` rows."""
    mask = problem.dirichlet_node_mask()
    dofs = []
    for n in range(problem.mesh.n_nodes):
        if mask[n]:
            continue
        dofs.extend((2 * n, 2 * n + 1))
    return np.asarray(dofs, dtype=np.int64)


def solve_forward(problem: ResidualProblem, x, **kwargs) -> np.ndarray:
    """Dispatch to the linear or Newton solver based on the problem's law."""
    if problem.law == "linear":
        return assemble_and_solve_linear(problem, x)
    return solve_neohookean(problem, x, **kwargs)
