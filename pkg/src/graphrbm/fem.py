"""P1 finite elements for the heat equation on an interval or a metric graph.

The semi-discrete system is ``E dY/dt + R Y = F`` with ``E`` the mass matrix,
``R`` the stiffness matrix and ``F`` the load vector.  Dirichlet vertices never
receive a degree of freedom, so ``E`` is SPD and ``R`` is SPD as well.

Degrees of freedom are laid out edge by edge in edge order.  An interior
vertex is stored directly in front of the interior nodes of its host edge
(see :meth:`MetricGraph.host`), which for the reference network gives the
layout ``e1 e2 e3 [v1] e4 e5 [v2] e6 e7 e8 e9 [v3] e10``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .graph import MetricGraph, check, interval_graph

# f(edge_id, x, t) -> values, vectorised in x
EdgeField = Callable[[int, np.ndarray, float], np.ndarray]

_GAUSS = {n: np.polynomial.legendre.leggauss(n) for n in (3, 5)}
_MASS_LOCAL = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
_STIFF_LOCAL = np.array([[1.0, -1.0], [-1.0, 1.0]])


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh1D:
    """Uniform mesh with ``N`` interior nodes on every edge."""
    N: int
    h: float

    def __post_init__(self):
        if self.N < 1:
            raise AssemblyError(f"need at least one interior node, got N={self.N}")
        if not self.h > 0:
            raise AssemblyError(f"mesh step must be positive, got h={self.h}")

    @classmethod
    def for_length(cls, L: float, N: int) -> "Mesh1D":
        return cls(N, L / (N + 1))

    def nodes(self) -> np.ndarray:
        """All node positions ``x_j = j h`` for ``j = 0..N+1``."""
        return np.arange(self.N + 2) * self.h


@dataclass(frozen=True)
class DofMap:
    """Maps mesh nodes to rows of the global system.

    ``edge_nodes[e]`` has length ``N + 2``: entry ``j`` is the dof of node
    ``x_j`` on edge ``e``, or ``-1`` at a Dirichlet vertex.
    """
    edge_nodes: dict[int, np.ndarray]
    edge_interior: dict[int, range]
    vertex_dof: dict[int, int]
    n_dof: int

    def edge_of_dof(self) -> np.ndarray:
        """Edge id per dof (vertex dofs report their host edge)."""
        out = np.zeros(self.n_dof, dtype=int)
        for e, rng in self.edge_interior.items():
            out[rng.start:rng.stop] = e
        return out


@dataclass(frozen=True)
class FemSystem:
    graph: MetricGraph
    mesh: Mesh1D
    dofs: DofMap
    E: sp.csr_matrix
    R: sp.csr_matrix

    @property
    def n_dof(self) -> int:
        return self.dofs.n_dof

    @property
    def h(self) -> float:
        return self.mesh.h

    @property
    def N(self) -> int:
        return self.mesh.N

    def elements(self):
        """Yield ``(edge_id, k, a, b)`` for element ``[x_k, x_{k+1}]``."""
        for e in self.graph.edges:
            nodes = self.dofs.edge_nodes[e.id]
            for k in range(self.N + 1):
                yield e.id, k, int(nodes[k]), int(nodes[k + 1])


def build_dofs(graph: MetricGraph, N: int) -> DofMap:
    hosted: dict[int, list[int]] = {}
    for v in sorted(graph.interior):
        hosted.setdefault(graph.host(v), []).append(v)
    vertex_dof: dict[int, int] = {}
    edge_interior: dict[int, range] = {}
    off = 0
    for e in graph.edges:
        for v in hosted.get(e.id, ()):
            vertex_dof[v] = off
            off += 1
        edge_interior[e.id] = range(off, off + N)
        off += N
    edge_nodes = {}
    for e in graph.edges:
        nodes = np.empty(N + 2, dtype=int)
        nodes[0] = vertex_dof.get(e.tail, -1)
        nodes[1:-1] = np.arange(edge_interior[e.id].start, edge_interior[e.id].stop)
        nodes[-1] = vertex_dof.get(e.head, -1)
        edge_nodes[e.id] = nodes
    return DofMap(edge_nodes, edge_interior, vertex_dof, off)


def element_arrays(system_or_dofs, graph: MetricGraph | None = None, N: int | None = None):
    """Element connectivity as arrays ``(edge_id, k, a, b)``."""
    if isinstance(system_or_dofs, FemSystem):
        dofs, graph, N = system_or_dofs.dofs, system_or_dofs.graph, system_or_dofs.N
    else:
        dofs = system_or_dofs
    eid, ks, a, b = [], [], [], []
    for e in graph.edges:
        nodes = dofs.edge_nodes[e.id]
        eid.append(np.full(N + 1, e.id))
        ks.append(np.arange(N + 1))
        a.append(nodes[:-1])
        b.append(nodes[1:])
    return (np.concatenate(eid), np.concatenate(ks),
            np.concatenate(a), np.concatenate(b))


def local_to_coo(a: np.ndarray, b: np.ndarray, local: np.ndarray, scale) -> tuple:
    """Scatter 2x2 element matrices into COO triples, skipping Dirichlet nodes.

    ``scale`` may be a scalar or one factor per element.
    """
    scale = np.broadcast_to(np.asarray(scale, dtype=float), a.shape)
    rows, cols, vals = [], [], []
    for i, ri in enumerate((a, b)):
        for j, cj in enumerate((a, b)):
            keep = (ri >= 0) & (cj >= 0)
            rows.append(ri[keep])
            cols.append(cj[keep])
            vals.append(local[i, j] * scale[keep])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def coo_to_csr(rows, cols, vals, n: int) -> sp.csr_matrix:
    m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def assemble(graph: MetricGraph | None, mesh: Mesh1D) -> FemSystem:
    """Assemble mass and stiffness matrices.

    ``graph=None`` means the interval ``[0, (N+1) h]`` with Dirichlet ends.
    """
    if graph is None:
        graph = interval_graph((mesh.N + 1) * mesh.h)
    check(graph)
    for e in graph.edges:
        if not math.isclose(e.length, (mesh.N + 1) * mesh.h, rel_tol=1e-12):
            raise AssemblyError(
                f"edge {e.id} has length {e.length} but the mesh covers {(mesh.N + 1) * mesh.h}")
    dofs = build_dofs(graph, mesh.N)
    _, _, a, b = element_arrays(dofs, graph, mesh.N)
    E = coo_to_csr(*local_to_coo(a, b, _MASS_LOCAL, mesh.h), dofs.n_dof)
    R = coo_to_csr(*local_to_coo(a, b, _STIFF_LOCAL, 1.0 / mesh.h), dofs.n_dof)
    return FemSystem(graph, mesh, dofs, E, R)


def assemble_interval(N: int, L: float = 1.0) -> FemSystem:
    return assemble(None, Mesh1D.for_length(L, N))


def _quadrature(system: FemSystem, order: int):
    """Physical Gauss points per element: ``x`` of shape (N+1, q), weights (q,)."""
    gx, gw = _GAUSS[order]
    h = system.h
    left = np.arange(system.N + 1)[:, None] * h
    x = left + (gx + 1.0) * (h / 2.0)
    phi_right = (x - left) / h
    return x, gw * (h / 2.0), 1.0 - phi_right, phi_right


def assemble_load(system: FemSystem, f: EdgeField, t: float = 0.0, order: int = 3) -> np.ndarray:
    """Moments ``(f(., t), phi_j)`` by ``order``-point Gauss on each element."""
    x, w, phi_l, phi_r = _quadrature(system, order)
    F = np.zeros(system.n_dof)
    for e in system.graph.edges:
        fv = np.asarray(f(e.id, x, t), dtype=float) * np.ones_like(x)
        nodes = system.dofs.edge_nodes[e.id]
        left = (fv * phi_l) @ w
        right = (fv * phi_r) @ w
        keep = nodes[:-1] >= 0
        np.add.at(F, nodes[:-1][keep], left[keep])
        keep = nodes[1:] >= 0
        np.add.at(F, nodes[1:][keep], right[keep])
    return F


def project_initial(system: FemSystem, y0: EdgeField, order: int = 3) -> np.ndarray:
    """L2 projection onto the P1 space: solve ``E c = ((y0, phi_j))_j``."""
    b = assemble_load(system, y0, 0.0, order)
    if not b.any():
        return np.zeros(system.n_dof)
    return spla.spsolve(system.E.tocsc(), b)


def l2_norm(system: FemSystem, v: np.ndarray) -> float:
    v = np.asarray(v, dtype=float)
    if v.shape != (system.n_dof,):
        raise ValueError(f"expected a vector of length {system.n_dof}, got shape {v.shape}")
    return math.sqrt(max(float(v @ (system.E @ v)), 0.0))


def lambda_min_mass(N: int, h: float) -> float:
    """Smallest eigenvalue of the interval mass matrix (tridiagonal Toeplitz).

    Valid for the interval only; use :func:`mass_eigen_bounds` on graphs.
    """
    return h * (2.0 / 3.0 + math.cos(N * math.pi / (N + 1)) / 3.0)


def mass_eigen_bounds(system: FemSystem) -> tuple[float, float]:
    """Extreme eigenvalues ``(lambda_min, lambda_max)`` of ``E``."""
    n = system.n_dof
    if n <= 400:
        w = np.linalg.eigvalsh(system.E.toarray())
        return float(w[0]), float(w[-1])
    lo = spla.eigsh(system.E.tocsc(), k=1, sigma=0.0, which="LM",
                    return_eigenvectors=False)[0]
    hi = spla.eigsh(system.E, k=1, which="LA", return_eigenvectors=False)[0]
    return float(lo), float(hi)


def reconstruct(system: FemSystem, v: np.ndarray, edge: int, x) -> np.ndarray | float:
    """Evaluate the P1 field with coefficients ``v`` on ``edge`` at ``x``."""
    if edge not in system.dofs.edge_nodes:
        raise KeyError(f"unknown edge {edge}")
    nodes = system.dofs.edge_nodes[edge]
    vals = np.where(nodes >= 0, np.asarray(v)[np.maximum(nodes, 0)], 0.0)
    out = np.interp(np.asarray(x, dtype=float), system.mesh.nodes(), vals)
    return float(out) if np.ndim(out) == 0 else out


def export_coo(matrix: sp.spmatrix, path: str | Path) -> None:
    """Write ``row col value`` triples (0-based, 17 significant digits)."""
    m = sp.coo_matrix(matrix)
    order = np.lexsort((m.col, m.row))
    with open(path, "w") as fh:
        for i in order:
            fh.write(f"{m.row[i]} {m.col[i]} {m.data[i]:.17g}\n")
