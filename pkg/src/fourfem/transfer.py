"""Morley interpolation, the conforming companion, the C0IP transfer and smoothers.

All operators are linear; each is available both as a function acting on a
given input and as a sparse matrix acting on coefficient vectors, which is
what the residual and Jacobian assembly use.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .fespace import (
    Evaluable, FeFunction, FeSpace, SmoothFunction, average_operator,
    derivative_maps, edge_traces,
)
from .mesh import Triangulation
from .quadrature import REFERENCE_VERTICES, edge_rule, subtriangle_of
from .reference import (
    DX, DY, REFERENCE_EDGE_NORMALS, VALUE,
    bubble_correction, bubble_table, hct_table, p2_table,
)

SMOOTHERS = ("id", "IM", "JIM")


def normalize_smoother(tag):
    key = str(tag).strip().upper().replace("_", "").replace(" ", "")
    table = {"ID": "id", "IDENTITY": "id", "IM": "IM", "JIM": "JIM"}
    if key not in table:
        raise ValueError(f"unknown smoother {tag!r}; expected one of {SMOOTHERS}")
    return table[key]


def _space_cache(space, key, build):
    cache = space.__dict__.setdefault("_ops", {})
    if key not in cache:
        cache[key] = build()
    return cache[key]


def morley_space(mesh):
    if "morley_space" not in mesh._cache:
        mesh._cache["morley_space"] = FeSpace(mesh, "morley")
    return mesh._cache["morley_space"]


# --- Morley interpolation -----------------------------------------------------

def broken_morley_interpolation(mesh):
    """Sparse ``(dim_M, 6 nt)`` Morley interpolation of broken P2 nodal values."""
    key = "broken_IM"
    if key in mesh._cache:
        return mesh._cache[key]
    VM = morley_space(mesh)
    nt = mesh.num_triangles
    counts = mesh.vertex_triangle_counts()
    tri = mesh.triangles
    rows_v = VM.vertex_dof[tri].ravel()
    cols_v = (6 * np.arange(nt)[:, None] + np.arange(3)).ravel()
    vals_v = 1.0 / counts[tri].ravel()
    keep = rows_v >= 0
    Vpart = sp.csr_matrix((vals_v[keep], (rows_v[keep], cols_v[keep])), shape=(VM.dim, 6 * nt))
    # the normal derivative of a P2 function is affine, so its edge mean is the midpoint value
    avg = average_operator(mesh, np.array([0.5]), "normal")
    ie = mesh.interior_edges
    sel = sp.csr_matrix((np.ones(len(ie)), (VM.edge_dof[ie], ie)), shape=(VM.dim, mesh.num_edges))
    op = (Vpart + sel @ avg).tocsr()
    mesh._cache[key] = op
    return op


def morley_interpolation_matrix(space):
    """Sparse ``(dim_M, dim)`` matrix of ``I_M`` on the coefficients of ``space``."""
    return _space_cache(space, "IM", lambda: (broken_morley_interpolation(space.mesh)
                                                @ space.extraction).tocsr())


def morley_interpolate(v, target=None, edge_degree=10):
    """Morley interpolation ``I_M v``.

    Parameters
    ----------
    v : FeFunction, C1Function, Evaluable or callable
        The function to interpolate.  A callable must return the derivative
        vector ``(v, v_x, v_y, v_xx, v_xy, v_yy)`` at ``(x, y)``.
    target : Triangulation or FeSpace, optional
        Mesh (or Morley space) of the result; defaults to ``v.mesh``.

    Interior vertex dofs are averages of the one-sided vertex values,
    interior edge dofs are edge means of the averaged normal derivative and
    boundary dofs are zero.
    """
    if isinstance(target, FeSpace):
        VM, mesh = target, target.mesh
    else:
        mesh = target if isinstance(target, Triangulation) else getattr(v, "mesh", None)
        if mesh is None:
            raise ValueError("a mesh is needed to interpolate a callable")
        VM = morley_space(mesh)
    if isinstance(v, FeFunction) and v.mesh is mesh:
        return FeFunction(VM, morley_interpolation_matrix(v.space) @ v.coeffs)
    if not isinstance(v, Evaluable):
        v = SmoothFunction(mesh, v)

    nt = mesh.num_triangles
    cells = np.repeat(np.arange(nt), 3)
    pts = np.tile(REFERENCE_VERTICES, (nt, 1))
    # corners belong to two Clough-Tocher subtriangles; the value is continuous
    vals = v.evaluate_cells(cells, pts, subtriangle_of(pts))[:, VALUE]
    sums = np.bincount(mesh.triangles.ravel(), weights=vals, minlength=mesh.num_vertices)
    avg_v = sums / mesh.vertex_triangle_counts()

    rule = edge_rule(edge_degree)
    tr = edge_traces(v, rule.points)                       # (ne, 2, nq, 6)
    nu = mesh.normals
    dn = tr[..., DX] * nu[:, None, None, 0] + tr[..., DY] * nu[:, None, None, 1]
    means = np.einsum("q,esq->es", rule.weights, dn)
    avg_e = np.where(mesh.boundary_edges, means[:, 0], 0.5 * (means[:, 0] + means[:, 1]))

    c = np.zeros(VM.dim)
    iv, ie = mesh.interior_vertices, mesh.interior_edges
    c[VM.vertex_dof[iv]] = avg_v[iv]
    c[VM.edge_dof[ie]] = avg_e[ie]
    return FeFunction(VM, c)


# --- companion ------------------------------------------------------------------

def hct_reference_transform(mesh):
    """``(nt, 12, 12)`` maps from physical HCT dofs to reference HCT dofs.

    Physical dofs per triangle: the three vertex values, the three vertex
    gradients ``(v_x, v_y)`` and the edge means of ``dv/dnu_E`` on local edges
    0, 1, 2 (global edge normal).  Reference dofs use reference gradients
    and the outward reference normals.
    """
    key = "hct_T"
    if key in mesh._cache:
        return mesh._cache[key]
    nt = mesh.num_triangles
    B = mesh.jacobians
    T = np.zeros((nt, 12, 12))
    T[:, 0:3, 0:3] = np.eye(3)
    Bt = np.transpose(B, (0, 2, 1))
    for j in range(3):
        T[:, 3 + 2 * j:5 + 2 * j, 3 + 2 * j:5 + 2 * j] = Bt
    P = mesh.vertices[mesh.triangles]                       # (nt, 3, 2)
    for i in range(3):
        a, b = (i + 1) % 3, (i + 2) % 3
        edge = mesh.triangle_edges[:, i]
        nu = mesh.normals[edge]
        t = P[:, b] - P[:, a]
        h = np.linalg.norm(t, axis=1)
        t = t / h[:, None]
        # mean gradient on the edge = nu * (normal mean) + t * (v_b - v_a) / h
        nhat_B = np.einsum("j,kji->ki", REFERENCE_EDGE_NORMALS[i], Bt)   # n^T B^T
        T[:, 9 + i, 9 + i] = np.einsum("ki,ki->k", nhat_B, nu)
        tang = np.einsum("ki,ki->k", nhat_B, t) / h
        T[:, 9 + i, b] += tang
        T[:, 9 + i, a] -= tang
    mesh._cache[key] = T
    return T


def companion_matrices(mesh):
    """Sparse maps from Morley coefficients to companion data.

    Returns ``(H, L)``: ``H`` is ``(12 nt, dim_M)`` giving the physical HCT
    dofs, ``L`` is ``(18 nt, dim_M)`` giving per triangle the 12 reference
    HCT dofs followed by the 6 bubble coefficients.
    """
    key = "companion"
    if key in mesh._cache:
        return mesh._cache[key]
    VM = morley_space(mesh)
    nt, nv = mesh.num_triangles, mesh.num_vertices
    E = VM.extraction                                        # (6nt, dimM)

    # one-sided physical gradients at the triangle vertices
    A = derivative_maps(mesh)
    ref = p2_table(REFERENCE_VERTICES)                       # (3 vert, 6b, 6d)
    grads = np.einsum("kij,abj->kaib", A[:, 1:3, 1:3], ref[:, :, 1:3])   # (nt, 3, 2, 6)
    rows = np.broadcast_to((6 * np.arange(nt))[:, None, None, None], (nt, 3, 2, 6))
    vid = np.broadcast_to(mesh.triangles[:, :, None, None], (nt, 3, 2, 6))
    comp = np.broadcast_to(np.arange(2)[None, None, :, None], (nt, 3, 2, 6))
    cols = rows + np.arange(6)
    counts = mesh.vertex_triangle_counts()
    interior = ~mesh.boundary_vertices
    w = grads / counts[vid] * interior[vid]
    avg_grad = sp.csr_matrix((w.ravel(), ((2 * vid + comp).ravel(), cols.ravel())),
                             shape=(2 * nv, 6 * nt))         # averaged nodal gradients

    # assemble physical dofs per triangle: rows 12K + local
    r_val = (12 * np.arange(nt)[:, None] + np.arange(3)).ravel()
    val_sel = sp.csr_matrix((np.ones(3 * nt), (r_val, mesh.triangles.ravel())), shape=(12 * nt, nv))
    r_grad = (12 * np.arange(nt)[:, None] + 3 + np.arange(6)).ravel()
    c_grad = (2 * mesh.triangles[:, :, None] + np.arange(2)).ravel()
    grad_sel = sp.csr_matrix((np.ones(6 * nt), (r_grad, c_grad)), shape=(12 * nt, 2 * nv))
    r_edge = (12 * np.arange(nt)[:, None] + 9 + np.arange(3)).ravel()
    edge_sel = sp.csr_matrix((np.ones(3 * nt), (r_edge, mesh.triangle_edges.ravel())),
                             shape=(12 * nt, mesh.num_edges))

    iv, ie = mesh.interior_vertices, mesh.interior_edges
    v_of = sp.csr_matrix((np.ones(len(iv)), (iv, VM.vertex_dof[iv])), shape=(nv, VM.dim))
    e_of = sp.csr_matrix((np.ones(len(ie)), (ie, VM.edge_dof[ie])), shape=(mesh.num_edges, VM.dim))
    H = (val_sel @ v_of + grad_sel @ (avg_grad @ E) + edge_sel @ e_of).tocsr()

    T = hct_reference_transform(mesh)
    Tblk = _block_diag(T)
    Dref = (Tblk @ H).tocsr()                                # (12nt, dimM)
    Cv, Cd = bubble_correction()
    Q = (_block_diag(np.broadcast_to(Cv, (nt, 6, 6))) @ E
         - _block_diag(np.broadcast_to(Cd, (nt, 6, 12))) @ Dref).tocsr()
    # interleave to 18 rows per triangle
    perm_d = (18 * np.arange(nt)[:, None] + np.arange(12)).ravel()
    perm_q = (18 * np.arange(nt)[:, None] + 12 + np.arange(6)).ravel()
    Pd = sp.csr_matrix((np.ones(12 * nt), (perm_d, np.arange(12 * nt))), shape=(18 * nt, 12 * nt))
    Pq = sp.csr_matrix((np.ones(6 * nt), (perm_q, np.arange(6 * nt))), shape=(18 * nt, 6 * nt))
    L = (Pd @ Dref + Pq @ Q).tocsr()
    mesh._cache[key] = (H, L)
    return H, L


def _block_diag(blocks):
    """Sparse block diagonal of an array ``(n, r, c)``."""
    n, r, c = blocks.shape
    rows = np.broadcast_to((r * np.arange(n))[:, None, None] + np.arange(r)[None, :, None], (n, r, c))
    cols = np.broadcast_to((c * np.arange(n))[:, None, None] + np.arange(c)[None, None, :], (n, r, c))
    return sp.csr_matrix((np.ascontiguousarray(blocks).ravel(), (rows.ravel(), cols.ravel())),
                         shape=(n * r, n * c))


def c1_reference_table(points, sub=None):
    """Reference table of the 18 local companion functions: ``(npts, 18, 6)``."""
    points = np.atleast_2d(points)
    if sub is None:
        sub = subtriangle_of(points)
    return np.concatenate([hct_table(points, sub), bubble_table(points)], axis=1)


class C1Function(Evaluable):
    """Globally C1 function: reduced HCT macro-cubic plus ``b_K^2 q_K`` per triangle.

    Attributes
    ----------
    hct : (nt, 12) array
        Physical HCT dofs per triangle (vertex values, vertex gradients,
        edge means of ``dv/dnu_E``).
    bubble : (nt, 6) array
        Coefficients of ``q_K`` in the nodal P2 basis.
    """

    piecewise_split = True

    def __init__(self, mesh, hct, bubble):
        self.mesh = mesh
        self.hct = np.asarray(hct, dtype=float).reshape(mesh.num_triangles, 12)
        self.bubble = np.asarray(bubble, dtype=float).reshape(mesh.num_triangles, 6)

    def local_coefficients(self):
        """``(nt, 18)`` reference HCT dofs followed by bubble coefficients."""
        ref = np.einsum("kij,kj->ki", hct_reference_transform(self.mesh), self.hct)
        return np.concatenate([ref, self.bubble], axis=1)

    def evaluate_cells(self, cells, ref_points, sub=None):
        cells = np.asarray(cells)
        tab = c1_reference_table(ref_points, sub)
        ref = np.einsum("nbd,nb->nd", tab, self.local_coefficients()[cells])
        return np.einsum("nij,nj->ni", derivative_maps(self.mesh)[cells], ref)

    def tabulate(self, ref_points, sub=None):
        tab = c1_reference_table(ref_points, sub)
        ref = np.einsum("qbd,kb->kqd", tab, self.local_coefficients())
        return np.einsum("kij,kqj->kqi", derivative_maps(self.mesh), ref)


def companion(v_M):
    """Conforming companion ``J v_M`` of a Morley function."""
    if v_M.space.scheme != "morley":
        raise ValueError("companion expects a function on the Morley space")
    mesh = v_M.mesh
    H, L = companion_matrices(mesh)
    hct = (H @ v_M.coeffs).reshape(-1, 12)
    bubble = (L @ v_M.coeffs).reshape(-1, 18)[:, 12:]
    if not np.all(np.isfinite(bubble)):
        raise np.linalg.LinAlgError("singular bubble Gram system")
    return C1Function(mesh, hct, bubble)


def transfer_IC(v_M):
    """C0IP function: vertex values copied, edge midpoints set to the two-sided average."""
    mesh = v_M.mesh
    VC = mesh._cache.get("c0ip_space") or mesh._cache.setdefault("c0ip_space", FeSpace(mesh, "c0ip"))
    nodal = v_M.nodal()
    nv = mesh.num_vertices
    vert = np.zeros(nv)
    vert[mesh.triangles.ravel()] = nodal[:, :3].ravel()
    mid = average_operator(mesh, np.array([0.5]), "value") @ nodal.ravel()
    c = np.zeros(VC.dim)
    iv, ie = mesh.interior_vertices, mesh.interior_edges
    c[VC.vertex_dof[iv]] = vert[iv]
    c[VC.edge_dof[ie]] = mid[ie]
    return FeFunction(VC, c)


def apply_smoother(tag, v):
    """``id``, ``I_M`` or ``J I_M`` applied to ``v``."""
    tag = normalize_smoother(tag)
    if tag == "id":
        return v
    vm = morley_interpolate(v)
    return vm if tag == "IM" else companion(vm)


class LocalOperator:
    """Linear map from coefficients to per-triangle local coefficients.

    ``kind`` is ``"p2"`` (6 nodal values per triangle) or ``"c1"`` (12
    reference HCT dofs plus 6 bubble coefficients).  The map factors as
    ``local @ middle``: ``middle`` is the Morley interpolation matrix for
    ``IM``/``JIM`` and ``None`` (identity) for ``id``, so the nonlinear
    Jacobian block lives on the usually much smaller middle space.
    """

    def __init__(self, kind, local, middle=None):
        self.kind = kind
        self.local = local.tocsr()
        self.middle = None if middle is None else middle.tocsr()
        self.ncoef = 6 if kind == "p2" else 18
        self._matrix = None

    @property
    def matrix(self):
        """Full ``(ncoef * nt, dim)`` map."""
        if self._matrix is None:
            self._matrix = self.local if self.middle is None else (self.local @ self.middle).tocsr()
        return self._matrix

    def reference_table(self, points, sub=None):
        if self.kind == "p2":
            return p2_table(points)
        return c1_reference_table(points, sub)


def smoother_operator(tag, space):
    """:class:`LocalOperator` of the smoother ``tag`` on ``space``."""
    tag = normalize_smoother(tag)

    def build():
        if tag == "id":
            return LocalOperator("p2", space.extraction)
        IM = morley_interpolation_matrix(space)
        if tag == "IM":
            return LocalOperator("p2", morley_space(space.mesh).extraction, IM)
        _, L = companion_matrices(space.mesh)
        return LocalOperator("c1", L, IM)

    return _space_cache(space, ("smoother", tag), build)


__all__ = [
    "SMOOTHERS", "normalize_smoother", "morley_interpolate", "morley_interpolation_matrix",
    "companion", "companion_matrices", "C1Function", "transfer_IC", "apply_smoother",
    "smoother_operator", "LocalOperator", "c1_reference_table", "morley_space",
]
