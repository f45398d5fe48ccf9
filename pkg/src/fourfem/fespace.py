"""Discrete spaces: Morley, dG-P2, C0IP (continuous P2) and WOPSIP-P2.

Every space is represented through the broken P2 space: each triangle
carries the six nodal values of a quadratic (vertices first, then the
midpoints of the edges opposite vertex 0, 1, 2).  A space is described by
a sparse extraction matrix ``E`` of shape ``(6 * nt, dim)`` mapping global
coefficients to these nodal values, so forms assembled once on the broken
space serve all four schemes through ``E.T @ A @ E``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import Triangulation
from .quadrature import edge_rule, parent_points, subtriangle_of
from .reference import (
    DX, DXX, DXY, DY, DYY, NDERIV, P2_NODES, VALUE,
    edge_reference_points, p2_table, physical_derivative_maps,
)

SCHEMES = ("morley", "dg", "c0ip", "wopsip")
_ALIASES = {"morley": "morley", "dg": "dg", "c0ip": "c0ip", "ip": "c0ip",
            "wopsip": "wopsip"}


def normalize_scheme(scheme):
    key = str(scheme).strip().lower().replace("⁰", "0").replace("-", "").replace("_", "")
    if key not in _ALIASES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    return _ALIASES[key]


def derivative_maps(mesh):
    """Cached ``(nt, 6, 6)`` reference-to-physical derivative maps of ``mesh``."""
    if "A" not in mesh._cache:
        mesh._cache["A"] = physical_derivative_maps(mesh.inverse_jacobians)
    return mesh._cache["A"]


def to_reference(mesh, cells, points):
    """Reference coordinates of physical ``points`` inside triangles ``cells``."""
    p0 = mesh.vertices[mesh.triangles[cells, 0]]
    return np.einsum("nij,nj->ni", mesh.inverse_jacobians[cells], points - p0)


def hessian_matrix(d):
    """``(..., 6)`` derivative vectors to ``(..., 2, 2)`` Hessians."""
    H = np.empty(d.shape[:-1] + (2, 2))
    H[..., 0, 0] = d[..., DXX]
    H[..., 0, 1] = H[..., 1, 0] = d[..., DXY]
    H[..., 1, 1] = d[..., DYY]
    return H


class Evaluable:
    """Piecewise function evaluable to second derivatives on a mesh.

    Subclasses implement :meth:`evaluate_cells`; :meth:`tabulate` evaluates
    the same reference points in every triangle.
    """

    mesh: Triangulation

    def evaluate_cells(self, cells, ref_points, sub=None):
        """Physical derivative vectors ``(N, 6)`` at reference points, one cell per point."""
        raise NotImplementedError

    def tabulate(self, ref_points, sub=None):
        """Physical derivative vectors ``(nt, npts, 6)`` at the same reference points of every triangle."""
        ref_points = np.atleast_2d(ref_points)
        nt, npts = self.mesh.num_triangles, len(ref_points)
        cells = np.repeat(np.arange(nt), npts)
        pts = np.tile(ref_points, (nt, 1))
        s = None if sub is None else np.tile(sub, nt)
        return self.evaluate_cells(cells, pts, s).reshape(nt, npts, NDERIV)


class SmoothFunction(Evaluable):
    """Closed-form function on a mesh.

    Parameters
    ----------
    mesh : Triangulation
    derivatives : callable
        ``derivatives(x, y)`` returning an array ``(..., 6)`` of
        ``(v, v_x, v_y, v_xx, v_xy, v_yy)``.
    """

    def __init__(self, mesh, derivatives):
        self.mesh = mesh
        self.derivatives = derivatives

    def evaluate_cells(self, cells, ref_points, sub=None):
        cells = np.asarray(cells)
        p0 = self.mesh.vertices[self.mesh.triangles[cells, 0]]
        x = p0 + np.einsum("nij,nj->ni", self.mesh.jacobians[cells], ref_points)
        return np.asarray(self.derivatives(x[:, 0], x[:, 1]), dtype=float).reshape(-1, NDERIV)


def polynomial_derivatives(coeffs):
    """Derivative callable of ``sum c[i, j] x**i y**j`` (for tests and examples)."""
    from numpy.polynomial import polynomial as npoly
    c = np.atleast_2d(np.asarray(coeffs, dtype=float))

    def der(c, i, j):
        for _ in range(i):
            c = npoly.polyder(c, axis=0) if c.shape[0] > 1 else np.zeros((1, c.shape[1]))
        for _ in range(j):
            c = npoly.polyder(c, axis=1) if c.shape[1] > 1 else np.zeros((c.shape[0], 1))
        return c

    parts = [der(c, i, j) for i, j in [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]]

    def derivatives(x, y):
        return np.stack([npoly.polyval2d(x, y, p) * np.ones_like(np.asarray(x, float))
                         for p in parts], axis=-1)

    return derivatives


class FeSpace:
    """Scheme-tagged finite element space on a triangulation.

    Attributes
    ----------
    scheme : str
        One of ``"morley"``, ``"dg"``, ``"c0ip"``, ``"wopsip"``.
    dim : int
        Number of free degrees of freedom.
    extraction : scipy.sparse.csr_matrix
        ``(6 * nt, dim)`` map from coefficients to broken P2 nodal values.
    local_to_global : (nt, 6) int array
        Global dof of each local dof, ``-1`` where the dof is constrained to
        zero.  For Morley the local dofs are the three vertex values and the
        mean normal derivatives on local edges 0, 1, 2 (normal ``nu_E``).
    vertex_dof, edge_dof : int arrays
        Global dof number of each vertex / edge (Morley and C0IP), ``-1``
        when constrained or not a dof.
    """

    def __init__(self, mesh, scheme):
        self.mesh = mesh
        self.scheme = normalize_scheme(scheme)
        nt = mesh.num_triangles
        if self.scheme in ("dg", "wopsip"):
            self.dim = 6 * nt
            self.local_to_global = np.arange(6 * nt).reshape(nt, 6)
            self.vertex_dof = -np.ones(mesh.num_vertices, dtype=np.int64)
            self.edge_dof = -np.ones(mesh.num_edges, dtype=np.int64)
            self.extraction = sp.identity(6 * nt, format="csr")
            self.constrained = np.zeros(0, dtype=np.int64)
            return

        iv = mesh.interior_vertices
        ie = mesh.interior_edges
        self.vertex_dof = -np.ones(mesh.num_vertices, dtype=np.int64)
        self.vertex_dof[iv] = np.arange(len(iv))
        self.edge_dof = -np.ones(mesh.num_edges, dtype=np.int64)
        self.edge_dof[ie] = len(iv) + np.arange(len(ie))
        self.dim = len(iv) + len(ie)
        l2g = np.concatenate(
            [self.vertex_dof[mesh.triangles], self.edge_dof[mesh.triangle_edges]], axis=1)
        self.local_to_global = l2g
        # constrained entities: boundary vertices, then boundary edges
        self.constrained = np.concatenate(
            [np.flatnonzero(mesh.boundary_vertices),
             mesh.num_vertices + np.flatnonzero(mesh.boundary_edges)])

        if self.scheme == "c0ip":
            rows = np.arange(6 * nt).reshape(nt, 6)
            keep = l2g >= 0
            self.extraction = sp.csr_matrix(
                (np.ones(keep.sum()), (rows[keep], l2g[keep])), shape=(6 * nt, self.dim))
        else:
            self.local_basis = morley_local_basis(mesh)
            rows = np.broadcast_to(np.arange(6 * nt).reshape(nt, 6, 1), (nt, 6, 6))
            cols = np.broadcast_to(l2g[:, None, :], (nt, 6, 6))
            keep = cols >= 0
            self.extraction = sp.csr_matrix(
                (self.local_basis[keep], (rows[keep], cols[keep])), shape=(6 * nt, self.dim))

    def __repr__(self):
        return f"FeSpace({self.scheme}, dim={self.dim}, nt={self.mesh.num_triangles})"

    def function(self, coeffs=None):
        if coeffs is None:
            coeffs = np.zeros(self.dim)
        return FeFunction(self, coeffs)

    def from_nodal(self, nodal):
        """Coefficients of the broken P2 nodal values ``(nt, 6)`` (exact when representable).

        DG/WOPSIP take the values as they are; C0IP reads vertex and edge
        midpoint values from the first adjacent triangle; Morley applies the
        local dof functionals and reads them from the first adjacent
        triangle.  Constrained dofs are dropped.
        """
        nodal = np.asarray(nodal, dtype=float).reshape(-1, 6)
        if self.scheme in ("dg", "wopsip"):
            return nodal.ravel().copy()
        local = nodal if self.scheme == "c0ip" else morley_dofs_of_nodal(self.mesh, nodal)
        c = np.zeros(self.dim)
        l2g = self.local_to_global
        mask = l2g >= 0
        # reversed so that the first adjacent triangle is written last
        c[l2g[mask][::-1]] = local[mask][::-1]
        return c

    def interpolate(self, derivatives):
        """Coefficients of the P2 nodal interpolant of a closed-form function."""
        f = SmoothFunction(self.mesh, derivatives)
        nodal = f.tabulate(P2_NODES)[:, :, VALUE]
        return self.from_nodal(nodal)


def morley_local_basis(mesh):
    """Per-triangle ``(nt, 6, 6)`` nodal values of the local Morley basis.

    Column ``c`` holds the six P2 nodal values of the basis function dual to
    local Morley dof ``c``; obtained by inverting the dof-functional matrix.
    """
    D = morley_dof_matrix(mesh)
    return np.linalg.inv(D)


def morley_dof_matrix(mesh):
    """``(nt, 6, 6)`` matrix of Morley dof functionals applied to the nodal P2 basis."""
    nt = mesh.num_triangles
    A = derivative_maps(mesh)
    ref = p2_table(P2_NODES[3:])                           # (3 mid, 6 basis, 6 deriv)
    grads = np.einsum("kij,mbj->kmbi", A[:, 1:3, 1:3], ref[:, :, 1:3])   # (nt, 3, 6, 2)
    nu = mesh.normals[mesh.triangle_edges]                 # (nt, 3, 2)
    D = np.zeros((nt, 6, 6))
    D[:, 0:3, 0:3] = np.eye(3)
    D[:, 3:6, :] = np.einsum("kmbi,kmi->kmb", grads, nu)
    return D


def morley_dofs_of_nodal(mesh, nodal):
    """Local Morley dofs ``(nt, 6)`` of broken P2 nodal values."""
    return np.einsum("kab,kb->ka", morley_dof_matrix(mesh), nodal)


class FeFunction(Evaluable):
    """Coefficient vector on a :class:`FeSpace`."""

    def __init__(self, space, coeffs):
        coeffs = np.asarray(coeffs, dtype=float).ravel()
        if coeffs.shape != (space.dim,):
            raise ValueError(f"expected {space.dim} coefficients, got {coeffs.size}")
        self.space = space
        self.mesh = space.mesh
        self.coeffs = coeffs

    def __repr__(self):
        return f"FeFunction({self.space.scheme}, dim={self.space.dim})"

    def nodal(self):
        """Broken P2 nodal values ``(nt, 6)``."""
        return (self.space.extraction @ self.coeffs).reshape(-1, 6)

    def evaluate_cells(self, cells, ref_points, sub=None):
        cells = np.asarray(cells)
        tab = p2_table(ref_points)                          # (N, 6b, 6d)
        ref = np.einsum("nbd,nb->nd", tab, self.nodal()[cells])
        return np.einsum("nij,nj->ni", derivative_maps(self.mesh)[cells], ref)

    def tabulate(self, ref_points, sub=None):
        tab = p2_table(ref_points)                          # (npts, 6b, 6d)
        ref = np.einsum("qbd,kb->kqd", tab, self.nodal())
        return np.einsum("kij,kqj->kqi", derivative_maps(self.mesh), ref)

    def save(self, path):
        """Plain-text coefficient list with a scheme / mesh-hash header."""
        header = f"# scheme={self.space.scheme} mesh={self.mesh.hash()} dim={self.space.dim}"
        np.savetxt(path, self.coeffs, header=header[2:], comments="# ", fmt="%.17g")


def load_function(space, path):
    """Read coefficients written by :meth:`FeFunction.save`, checking scheme and mesh."""
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError("missing coefficient file header")
    meta = dict(tok.split("=", 1) for tok in text[0][1:].split())
    if meta.get("scheme") != space.scheme:
        raise ValueError(f"coefficient file is for scheme {meta.get('scheme')!r}")
    if meta.get("mesh") != space.mesh.hash():
        raise ValueError("coefficient file was written for a different mesh")
    return FeFunction(space, np.loadtxt(path, ndmin=1))


class VectorFeFunction:
    """Pair of functions on the same space (the von Karman unknowns)."""

    def __init__(self, first, second):
        if first.space is not second.space:
            raise ValueError("components must live on the same space")
        self.components = (first, second)
        self.space = first.space

    @classmethod
    def from_coeffs(cls, space, coeffs):
        coeffs = np.asarray(coeffs, dtype=float).ravel()
        return cls(FeFunction(space, coeffs[:space.dim]), FeFunction(space, coeffs[space.dim:]))

    @property
    def coeffs(self):
        return np.concatenate([c.coeffs for c in self.components])

    def __getitem__(self, i):
        return self.components[i]


def build_space(mesh, scheme):
    return FeSpace(mesh, scheme)


def evaluate(f, K, point, tol=1e-12):
    """Value, gradient and Hessian of ``f`` at a physical ``point`` in triangle ``K``."""
    mesh = f.mesh
    K = int(K)
    xi = to_reference(mesh, np.array([K]), np.asarray(point, dtype=float)[None, :])
    lam = np.array([1.0 - xi.sum(), xi[0, 0], xi[0, 1]])
    if lam.min() < -tol:
        raise ValueError(f"point {tuple(point)} lies outside triangle {K}")
    d = f.evaluate_cells(np.array([K]), xi, subtriangle_of(xi))[0]
    return d[VALUE], d[[DX, DY]], hessian_matrix(d)


# --- edge traces --------------------------------------------------------------

def edge_side_points(mesh, s):
    """Reference points of the edge parameters ``s`` seen from each adjacent triangle.

    Returns ``(cells, ref)`` with shapes ``(ne, 2)`` and ``(ne, 2, nq, 2)``;
    ``s`` runs from the lower to the higher vertex index of the edge.  The
    second side of a boundary edge repeats the first triangle and is masked
    by the callers.
    """
    s = np.asarray(s, dtype=float)
    cells = mesh.edge_triangles.copy()
    locs = mesh.edge_local.copy()
    bnd = cells[:, 1] < 0
    cells[bnd, 1] = cells[bnd, 0]
    locs[bnd, 1] = locs[bnd, 0]
    start = mesh.triangles[cells, (locs + 1) % 3]
    forward = start == mesh.edges[:, [0]]
    table = np.stack([np.stack([edge_reference_points(i, s),
                                edge_reference_points(i, 1.0 - s)]) for i in range(3)])
    ref = table[locs, np.where(forward, 0, 1)]              # (ne, 2, nq, 2)
    return cells, ref


def edge_traces(f, s):
    """Physical derivative vectors of ``f`` on both sides of every edge: ``(ne, 2, nq, 6)``.

    The second side of boundary edges is zero, so ``tr[:, 0] - tr[:, 1]``
    is the jump with the boundary convention (jump = trace).
    """
    mesh = f.mesh
    cells, ref = edge_side_points(mesh, s)
    ne, nq = len(cells), ref.shape[2]
    flat_cells = np.repeat(cells.ravel(), nq)
    flat_ref = ref.reshape(-1, 2)
    out = f.evaluate_cells(flat_cells, flat_ref, subtriangle_of(flat_ref)).reshape(ne, 2, nq, NDERIV)
    out[mesh.boundary_edges, 1] = 0.0
    return out


def edge_points(mesh, s):
    a = mesh.vertices[mesh.edges[:, 0]]
    b = mesh.vertices[mesh.edges[:, 1]]
    return a[:, None, :] + np.asarray(s)[None, :, None] * (b - a)[:, None, :]


def trace_jump(f, E, s):
    """Value jump and normal-derivative jump of ``f`` at parameter ``s`` of edge ``E``.

    Interior edges return ``K+ - K-`` traces (``K+`` the lower-indexed
    neighbour, ``nu_E`` its outer normal); boundary edges return the trace.
    """
    mesh = f.mesh
    E = int(E)
    s = np.atleast_1d(np.asarray(s, dtype=float))
    cells, ref = edge_side_points(mesh, s)
    vals = []
    for side in (0, 1):
        if side == 1 and mesh.boundary_edges[E]:
            vals.append(np.zeros((len(s), NDERIV)))
            continue
        r = ref[E, side]
        vals.append(f.evaluate_cells(np.full(len(s), cells[E, side]), r, subtriangle_of(r)))
    jump = vals[0] - vals[1]
    nu = mesh.normals[E]
    vj = jump[:, VALUE]
    nj = jump[:, DX] * nu[0] + jump[:, DY] * nu[1]
    if vj.size == 1:
        return float(vj[0]), float(nj[0])
    return vj, nj


# --- broken P2 operators on edges ---------------------------------------------

def edge_basis_tables(mesh, s):
    """Physical P2 basis tables on both sides of every edge.

    Returns ``(tables, cols)``: ``tables`` is ``(ne, 2, nq, 6 basis, 6 deriv)``
    with the second side of boundary edges zeroed and ``cols`` is
    ``(ne, 2, 6)`` broken nodal indices.
    """
    cells, ref = edge_side_points(mesh, s)
    ne, nq = len(cells), ref.shape[2]
    tab = p2_table(ref.reshape(-1, 2)).reshape(ne, 2, nq, 6, NDERIV)
    A = derivative_maps(mesh)[cells]                        # (ne, 2, 6, 6)
    tables = np.einsum("esij,esqbj->esqbi", A, tab)
    tables[mesh.boundary_edges, 1] = 0.0
    cols = 6 * cells[:, :, None] + np.arange(6)
    return tables, cols


def edge_operator(mesh, s, weights0, weights1):
    """Sparse ``(ne * nq, 6 nt)`` map from broken nodal values to edge-point quantities.

    The quantity at point ``q`` of edge ``e`` is
    ``sum_d weights0[e, q, d] * D_d v|side0 + weights1[e, q, d] * D_d v|side1``.
    """
    tables, cols = edge_basis_tables(mesh, s)
    ne, nq = tables.shape[0], tables.shape[2]
    w0 = np.broadcast_to(weights0, (ne, nq, NDERIV))
    w1 = np.broadcast_to(weights1, (ne, nq, NDERIV))
    v0 = np.einsum("eqbd,eqd->eqb", tables[:, 0], w0)
    v1 = np.einsum("eqbd,eqd->eqb", tables[:, 1], w1)
    rows = np.broadcast_to(np.arange(ne * nq).reshape(ne, nq, 1), (ne, nq, 6))
    c0 = np.broadcast_to(cols[:, 0, None, :], (ne, nq, 6))
    c1 = np.broadcast_to(cols[:, 1, None, :], (ne, nq, 6))
    data = np.concatenate([v0.ravel(), v1.ravel()])
    r = np.concatenate([rows.ravel(), rows.ravel()])
    c = np.concatenate([c0.ravel(), c1.ravel()])
    return sp.csr_matrix((data, (r, c)), shape=(ne * nq, 6 * mesh.num_triangles))


def jump_weights(mesh, kind):
    """Per-edge derivative weights ``(ne, 1, 6)`` selecting a quantity along ``nu_E``/``t_E``."""
    ne = mesh.num_edges
    w = np.zeros((ne, 1, NDERIV))
    if kind == "value":
        w[:, 0, VALUE] = 1.0
    elif kind == "normal":
        w[:, 0, DX], w[:, 0, DY] = mesh.normals[:, 0], mesh.normals[:, 1]
    elif kind == "tangent":
        w[:, 0, DX], w[:, 0, DY] = mesh.edge_tangents[:, 0], mesh.edge_tangents[:, 1]
    elif kind == "dx":
        w[:, 0, DX] = 1.0
    elif kind == "dy":
        w[:, 0, DY] = 1.0
    elif kind == "hess_nu_x":
        w[:, 0, DXX], w[:, 0, DXY] = mesh.normals[:, 0], mesh.normals[:, 1]
    elif kind == "hess_nu_y":
        w[:, 0, DXY], w[:, 0, DYY] = mesh.normals[:, 0], mesh.normals[:, 1]
    else:
        raise ValueError(f"unknown edge quantity {kind!r}")
    return w


def jump_operator(mesh, s, kind):
    w = jump_weights(mesh, kind)
    return edge_operator(mesh, s, w, -w)


def average_operator(mesh, s, kind):
    """Two-sided average on interior edges, trace on boundary edges."""
    w = jump_weights(mesh, kind)
    half = np.where(mesh.boundary_edges[:, None, None], 1.0, 0.5)
    return edge_operator(mesh, s, w * half, w * half)


def edge_quadrature(mesh, degree):
    """``(s, weights)`` with weights ``(ne * nq,)`` including the edge lengths."""
    rule = edge_rule(degree)
    w = (mesh.edge_lengths[:, None] * rule.weights[None, :]).ravel()
    return np.array(rule.points), w


def pw_constant_hessian(f, degree=10):
    """Per-triangle mean Hessians ``(nt, 2, 2)`` of ``f``.

    ``f`` is an :class:`Evaluable` (FeFunction, C1Function, SmoothFunction)
    or a derivative callable together with ``mesh`` via :class:`SmoothFunction`.
    """
    from .quadrature import split_points
    ps = split_points(degree) if getattr(f, "piecewise_split", False) else parent_points(degree)
    d = f.tabulate(ps.points, ps.sub)
    mean = np.einsum("q,kqd->kd", ps.weights, d) / ps.weights.sum()
    return hessian_matrix(mean)


project_pw_constant_hessian = pw_constant_hessian


def hessian_oscillation(f, degree=10):
    """``||(1 - Pi_0) D^2 f||_{L^2}`` with the Frobenius norm of the Hessian."""
    from .quadrature import split_points
    ps = split_points(degree) if getattr(f, "piecewise_split", False) else parent_points(degree)
    d = f.tabulate(ps.points, ps.sub)
    H = hessian_matrix(d)
    mean = pw_constant_hessian(f, degree)
    diff = H - mean[:, None]
    det = 2.0 * f.mesh.areas
    return float(np.sqrt(np.einsum("q,kqij,kqij,k->", ps.weights, diff, diff, det)))
