"""Weight-function generation and exact weighted-residual evaluation.

A weighted residual probes the equilibrium equations with a test function w
that vanishes on the Dirichlet boundary:

    r_w(x, y) = integral( sigma(grad u; x) : grad w )  -  integral_GammaN( g . w )

With piecewise-linear displacements and piecewise-constant materials both
grad u and sigma are constant on each triangle, so the volume integral is an
exact per-triangle sum and the boundary integral is exact under the
trapezoid rule (products of linear functions on straight edges).

The hot path is expressed through two precomputed sparse operators:
``GradientOperator`` maps nodal displacements to per-element gradient
components, and ``ResidualOperator`` contracts per-element stresses against a
batch of weight-function gradients.  Both work on plain arrays and on
autodiff Vars.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import matvec
from .constitutive import stress_components
from .mesh import Mesh, all_shape_gradients, boundary_edges

DIRICHLET_SEGMENTS = ("top", "left")
NEUMANN_SEGMENTS = ("bot", "right")


@dataclass(frozen=True)
class WeightFunction:
    """Sparse nodal test function: value 1 on ``nodes``, 0 elsewhere.

    Only one displacement component (1 or 2) is active.  ``center`` and
    ``radius`` record the circle the function was generated from.
    """

    nodes: np.ndarray
    component: int
    center: np.ndarray
    radius: float


@dataclass
class ResidualProblem:
    """Geometry, material law and boundary data for residual evaluation.

    ``dirichlet_segments`` controls which boundary parts carry (possibly
    unknown) essential conditions: weight functions always vanish there.
    ``dirichlet_values`` are the prescribed displacements (used when the
    essential data is actually given); ``tractions`` maps Neumann segment
    names to constant traction vectors.
    """

    mesh: Mesh
    law: str
    nu: float
    tractions: dict = field(default_factory=dict)
    dirichlet_segments: tuple = DIRICHLET_SEGMENTS
    dirichlet_values: float = 0.0

    def __post_init__(self):
        overlap = set(self.dirichlet_segments) & set(self.tractions)
        if overlap:
            raise ValueError(f"segments {sorted(overlap)} are both Dirichlet and Neumann")

    def dirichlet_node_mask(self) -> np.ndarray:
        mask = np.zeros(self.mesh.n_nodes, dtype=bool)
        for seg in self.dirichlet_segments:
            mask |= self.mesh.boundary_tags[seg]
        return mask

    def dirichlet_dof_mask(self) -> np.ndarray:
        """Boolean over displacement DOFs; both components constrained per node."""
        return np.repeat(self.dirichlet_node_mask(), 2)


def standard_problem(mesh: Mesh, law: str = "linear", nu: float = 0.45,
                     traction: float = 0.1) -> ResidualProblem:
    """Default configuration: clamped top/left, traction on bottom/right.

    The bottom edge is pulled down and the right edge pulled outward with
    magnitude ``traction``.
    """
    tractions = {"bot": np.array([0.0, -traction]), "right": np.array([traction, 0.0])}
    return ResidualProblem(mesh=mesh, law=law, nu=nu, tractions=tractions)


def generate_weight_functions(mesh: Mesh, N: int, r_max: float, seed: int,
                              dirichlet_segments=DIRICHLET_SEGMENTS):
    """Draw N random circular weight functions.

    Each function picks a uniformly random node as center, a radius uniform
    on [0, r_max] and an active component uniform in {1, 2}; nodes inside the
    circle get value 1, Dirichlet-boundary nodes are forced back to 0.
    Functions left with empty support are redrawn (at most 100 attempts).
    """
    if N < 1 or r_max <= 0:
        raise ValueError("need N >= 1 and r_max > 0")
    rng = np.random.default_rng(seed)
    blocked = np.zeros(mesh.n_nodes, dtype=bool)
    for seg in dirichlet_segments:
        blocked |= mesh.boundary_tags[seg]
    out = []
    for _ in range(N):
        for attempt in range(100):
            center = mesh.nodes[rng.integers(mesh.n_nodes)]
            radius = rng.uniform(0.0, r_max)
            component = int(rng.integers(1, 3))
            d2 = np.sum((mesh.nodes - center) ** 2, axis=1)
            active = np.flatnonzero((d2 <= radius * radius + 1e-15) & ~blocked)
            if active.size:
                out.append(WeightFunction(nodes=active, component=component,
                                          center=center.copy(), radius=radius))
                break
        else:
            raise RuntimeError("could not draw a weight function with nonempty support "
                               "in 100 attempts")
    return out


class GradientOperator:
    """Maps nodal displacement vectors to per-element gradient components.

    ``apply(y)`` returns (g11, g12, g21, g22); each is a length-n_elements
    array (or a batch of rows for 2D input).  Works on arrays and on Vars.
    """

    def __init__(self, mesh: Mesh):
        grads, areas = all_shape_gradients(mesh)
        self.areas = areas
        n_e = mesh.n_elements
        rows = np.repeat(np.arange(n_e), 3)
        self.matrices = {}
        for a in (0, 1):       # displacement component
            for b in (0, 1):   # spatial derivative
                cols = (2 * mesh.elements + a).reshape(-1)
                vals = grads[:, :, b].reshape(-1)
                self.matrices[(a, b)] = sp.csr_matrix(
                    (vals, (rows, cols)), shape=(n_e, mesh.n_dofs))

    def apply(self, y):
        return (matvec(self.matrices[(0, 0)], y),
                matvec(self.matrices[(0, 1)], y),
                matvec(self.matrices[(1, 0)], y),
                matvec(self.matrices[(1, 1)], y))


class ResidualOperator:
    """Contracts per-element stresses against a fixed batch of weight functions.

    Row k of the sparse factors holds area-weighted gradient components of
    weight function k, so ``apply`` evaluates all r_w in the batch at once:

        r = s11 . P11 + s22 . P22 + s12 . P12  -  boundary_term
    """

    def __init__(self, problem: ResidualProblem, weights):
        mesh = problem.mesh
        grads, areas = all_shape_gradients(mesh)
        n_w = len(weights)
        n_e = mesh.n_elements

        # per-node membership lookup: elements touching each node
        rows_p = {}
        data_p = {}
        for key in ("p11", "p22", "p12"):
            rows_p[key] = []
            data_p[key] = []
        cols = {key: [] for key in rows_p}

        node_elems = [[] for _ in range(mesh.n_nodes)]
        for e, tri in enumerate(mesh.elements):
            for k, n in enumerate(tri):
                node_elems[n].append((e, k))

        for k_w, w in enumerate(weights):
            acc = {}
            for n in w.nodes:
                for (e, local) in node_elems[n]:
                    g = grads[e, local]  # gradient of this node's shape function
                    cur = acc.setdefault(e, np.zeros(2))
                    cur += g
            c = w.component - 1
            for e, gw in acc.items():
                # sigma : grad w with only component c of w active:
                #   s_c1 * gw[0] + s_c2 * gw[1]
                a = areas[e]
                if c == 0:
                    pairs = (("p11", gw[0]), ("p12", gw[1]))
                else:
                    pairs = (("p22", gw[1]), ("p12", gw[0]))
                for key, val in pairs:
                    if val != 0.0:
                        rows_p[key].append(k_w)
                        cols[key].append(e)
                        data_p[key].append(a * val)

        self.factors = {}
        for key in rows_p:
            self.factors[key] = sp.csr_matrix(
                (data_p[key], (rows_p[key], cols[key])), shape=(n_w, n_e))
        self.boundary = _boundary_terms(problem, weights)
        self.n_weights = n_w

    def apply(self, s11, s22, s12):
        """All weighted residuals for one stress state (or a batch of them)."""
        r = (matvec(self.factors["p11"], s11)
             + matvec(self.factors["p22"], s22)
             + matvec(self.factors["p12"], s12))
        return r - self.boundary


def _boundary_terms(problem: ResidualProblem, weights) -> np.ndarray:
    """Exact traction integrals integral_GammaN(g . w) per weight function."""
    mesh = problem.mesh
    values = np.zeros(len(weights))
    for segment, g in problem.tractions.items():
        edges = boundary_edges(mesh, segment)
        if edges.size == 0:
            continue
        lengths = np.linalg.norm(mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]], axis=1)
        for k_w, w in enumerate(weights):
            active = np.zeros(mesh.n_nodes, dtype=bool)
            active[w.nodes] = True
            za = active[edges[:, 0]].astype(float)
            zb = active[edges[:, 1]].astype(float)
            # w is linear on each edge: trapezoid rule is exact
            values[k_w] += float(g[w.component - 1]) * np.sum(lengths * 0.5 * (za + zb))
    return values


def element_stresses(problem: ResidualProblem, x, y, grad_op: GradientOperator = None):
    """Per-element stress components (s11, s22, s12) for coefficients (x, y)."""
    if grad_op is None:
        grad_op = GradientOperator(problem.mesh)
    g11, g12, g21, g22 = grad_op.apply(y)
    return stress_components(problem.law, g11, g12, g21, g22, x, problem.nu)


def weighted_residual(problem: ResidualProblem, x, y, w: WeightFunction) -> float:
    """Exact weighted residual r_w(x, y) for a single weight function."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != (problem.mesh.n_elements,):
        raise ValueError("x must hold one coefficient per element")
    if y.shape != (problem.mesh.n_dofs,):
        raise ValueError("y must hold two coefficients per node")
    op = ResidualOperator(problem, [w])
    s11, s22, s12 = element_stresses(problem, x, y)
    return float(op.apply(s11, s22, s12)[0])


def residual_gradients(problem: ResidualProblem, x, y, w: WeightFunction):
    """Exact (dr/dx, dr/dy) of the scalar residual, via the autodiff tape."""
    op = ResidualOperator(problem, [w])
    grad_op = GradientOperator(problem.mesh)
    tape = ad.Tape()
    xv = tape.input(np.asarray(x, dtype=np.float64))
    yv = tape.input(np.asarray(y, dtype=np.float64))
    s11, s22, s12 = element_stresses(problem, xv, yv, grad_op)
    r = op.apply(s11, s22, s12)
    tape.mark_output(ad.total(r))
    gx, gy = tape.backward()
    return gx, gy
