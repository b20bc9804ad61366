"""Structured triangular mesh on the unit square.

Nodes sit on a regular nx-by-ny grid over [0,1]^2; every grid square is split
into two counterclockwise triangles by the bottom-left-to-top-right diagonal.
Displacement DOFs are interleaved: node n carries dofs (2n, 2n+1) for the two
components.

Boundary segments follow the convention: "bot" is y=0, "right" is x=1,
"top" is y=1, "left" is x=0.  Corner nodes belong to both adjacent segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

BOUNDARY_SEGMENTS = ("top", "left", "bot", "right")


@dataclass(frozen=True)
class Mesh:
    """Immutable structured triangulation.

    Attributes
    ----------
    nx, ny : int
        Node counts per axis.
    nodes : (n_nodes, 2) float array
        Node coordinates in [0,1]^2.
    elements : (n_elements, 3) int array
        Node-index triples, counterclockwise.
    boundary_tags : dict[str, (n_nodes,) bool array]
        Per-node membership in each boundary segment.
    element_adjacency : (n_interior_edges, 2) int array
        Pairs of element indices sharing an edge, lexicographically sorted.
    """

    nx: int
    ny: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary_tags: dict = field(repr=False)
    element_adjacency: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    def node_index(self, i: int, j: int) -> int:
        return j * self.nx + i

    def segment_nodes(self, segment: str) -> np.ndarray:
        """Node indices on a named boundary segment."""
        return np.flatnonzero(self.boundary_tags[segment])

    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    def containing_elements(self, points: np.ndarray) -> np.ndarray:
        """Element index containing each query point (structured O(1) lookup).

        Points must lie in [0,1]^2; points on cell edges resolve to the
        lower-index cell, consistent with the piecewise-constant field
        convention used throughout.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if np.any(pts < -1e-12) or np.any(pts > 1 + 1e-12):
            raise ValueError("query point outside the unit square")
        hx = 1.0 / (self.nx - 1)
        hy = 1.0 / (self.ny - 1)
        ci = np.clip((pts[:, 0] / hx).astype(int), 0, self.nx - 2)
        cj = np.clip((pts[:, 1] / hy).astype(int), 0, self.ny - 2)
        # local coordinates decide which of the two triangles of the square
        lx = pts[:, 0] / hx - ci
        ly = pts[:, 1] / hy - cj
        lower = (ly <= lx).astype(int)  # triangle below the diagonal is listed first
        return 2 * (cj * (self.nx - 1) + ci) + (1 - lower)


def build_structured_mesh(nx: int, ny: int) -> Mesh:
    """Build the structured triangulation with nx*ny nodes.

    Raises ValueError for nx < 2 or ny < 2.
    """
    if nx < 2 or ny < 2:
        raise ValueError(f"mesh needs at least 2 nodes per axis, got nx={nx}, ny={ny}")
    xs = np.linspace(0.0, 1.0, nx)
    ys = np.linspace(0.0, 1.0, ny)
    nodes = np.column_stack([np.tile(xs, ny), np.repeat(ys, nx)])

    elements = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b = j * nx + i + 1
            c = (j + 1) * nx + i + 1
            d = (j + 1) * nx + i
            elements.append((a, b, c))  # below the a-c diagonal
            elements.append((a, c, d))  # above it
    elements = np.asarray(elements, dtype=np.int64)

    boundary_tags = {
        "bot": nodes[:, 1] == 0.0,
        "top": nodes[:, 1] == 1.0,
        "left": nodes[:, 0] == 0.0,
        "right": nodes[:, 0] == 1.0,
    }

    edge_owners = {}
    for e, tri in enumerate(elements):
        for k in range(3):
            key = (min(tri[k], tri[(k + 1) % 3]), max(tri[k], tri[(k + 1) % 3]))
            edge_owners.setdefault(key, []).append(e)
    adjacency = sorted(
        tuple(sorted(owners)) for owners in edge_owners.values() if len(owners) == 2
    )
    adjacency = np.asarray(adjacency, dtype=np.int64).reshape(-1, 2)

    for arr in (nodes, elements, adjacency):
        arr.setflags(write=False)
    return Mesh(nx=nx, ny=ny, nodes=nodes, elements=elements,
                boundary_tags=boundary_tags, element_adjacency=adjacency)


def shape_gradients(mesh: Mesh, element: int):
    """Constant gradients of the three linear shape functions plus the area.

    Returns ``(grads, area)`` with grads of shape (3, 2); the rows sum to
    zero (partition of unity).
    """
    p = mesh.nodes[mesh.elements[element]]
    area = 0.5 * ((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                  - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1]))
    grads = np.empty((3, 2))
    for k in range(3):
        a, b = p[(k + 1) % 3], p[(k + 2) % 3]
        grads[k, 0] = (a[1] - b[1]) / (2.0 * area)
        grads[k, 1] = (b[0] - a[0]) / (2.0 * area)
    return grads, area


def all_shape_gradients(mesh: Mesh):
    """Vectorized :func:`shape_gradients` over every element.

    Returns ``(grads, areas)`` with shapes (n_elements, 3, 2) and (n_elements,).
    """
    p = mesh.nodes[mesh.elements]  # (n_e, 3, 2)
    v1 = p[:, 1] - p[:, 0]
    v2 = p[:, 2] - p[:, 0]
    areas = 0.5 * (v1[:, 0] * v2[:, 1] - v2[:, 0] * v1[:, 1])
    grads = np.empty((mesh.n_elements, 3, 2))
    for k in range(3):
        a = p[:, (k + 1) % 3]
        b = p[:, (k + 2) % 3]
        grads[:, k, 0] = (a[:, 1] - b[:, 1]) / (2.0 * areas)
        grads[:, k, 1] = (b[:, 0] - a[:, 0]) / (2.0 * areas)
    return grads, areas


def jump_operator(mesh: Mesh) -> sp.csr_matrix:
    """Sparse difference operator over neighboring elements.

    One row per interior edge; the row for adjacent elements (e1, e2) with
    e1 < e2 holds +1 at e1 and -1 at e2.  Applied to element-wise fields it
    returns the vector of inter-element jumps.
    """
    adj = mesh.element_adjacency
    n_edges = adj.shape[0]
    rows = np.repeat(np.arange(n_edges), 2)
    cols = adj.reshape(-1)
    vals = np.tile([1.0, -1.0], n_edges)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n_edges, mesh.n_elements))


def boundary_edges(mesh: Mesh, segment: str) -> np.ndarray:
    """Consecutive node pairs forming the element edges of one boundary segment."""
    idx = mesh.segment_nodes(segment)
    pts = mesh.nodes[idx]
    axis = 0 if segment in ("bot", "top") else 1
    order = np.argsort(pts[:, axis])
    idx = idx[order]
    return np.column_stack([idx[:-1], idx[1:]])
