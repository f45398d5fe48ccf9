"""Conforming triangulations of polygonal domains.

A :class:`Triangulation` stores vertex coordinates and counterclockwise
triangles and derives everything else (edges, adjacency, normals, sizes)
once at construction.  Arrays are marked read-only after construction.

Edge conventions
----------------
Edges are stored as sorted vertex pairs ``(a, b)`` with ``a < b``.  The two
adjacent triangles are ``(K+, K-)`` with ``K+`` the lower triangle index and
``K- = -1`` on the boundary.  The stored unit normal of an edge is the outer
normal of ``K+``.  Jumps are ``phi|K+ - phi|K-`` and reduce to the trace
``phi|K+`` on boundary edges.

Triangle ``K`` with vertices ``(v0, v1, v2)`` has local edge ``i`` opposite
local vertex ``i``, running from ``v[i+1]`` to ``v[i+2]`` (indices mod 3).
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Invalid triangulation data."""


class MeshFormatError(MeshError):
    """Malformed mesh file; the message carries the offending line number."""


def _readonly(*arrays):
    for a in arrays:
        a.setflags(write=False)


class Triangulation:
    """Immutable conforming triangulation.

    Parameters
    ----------
    vertices : (nv, 2) array_like
        Vertex coordinates.
    triangles : (nt, 3) array_like of int
        Vertex indices of each triangle, counterclockwise.
    parents : (nt,) array_like of int, optional
        Index of the enclosing triangle of a coarser mesh (set by
        :func:`uniform_refine`).
    """

    def __init__(self, vertices, triangles, parents=None):
        vertices = np.array(vertices, dtype=float).reshape(-1, 2)
        triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) == 0:
            raise MeshError("triangulation has no triangles")
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            raise MeshError("triangle references a vertex index out of range")
        self.vertices = vertices
        self.triangles = triangles
        self.parents = None if parents is None else np.asarray(parents, dtype=np.int64)
        self._cache = {}

        p0, p1, p2 = (vertices[triangles[:, i]] for i in range(3))
        d1, d2 = p1 - p0, p2 - p0
        signed = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if np.any(signed <= 0.0):
            bad = int(np.flatnonzero(signed <= 0.0)[0])
            raise MeshError(f"triangle {bad} is degenerate or clockwise")
        self.areas = signed

        # edges: local edge i of K joins v[i+1], v[i+2]
        nt = len(triangles)
        loc = np.array([[1, 2], [2, 0], [0, 1]])
        pairs = triangles[:, loc]                      # (nt, 3, 2)
        spairs = np.sort(pairs, axis=2).reshape(-1, 2)
        edges, inverse, counts = np.unique(
            spairs, axis=0, return_inverse=True, return_counts=True
        )
        inverse = inverse.reshape(-1)
        if np.any(counts > 2):
            raise MeshError("non-manifold edge shared by more than two triangles")
        self.edges = edges
        self.triangle_edges = inverse.reshape(nt, 3)

        ne = len(edges)
        owner = np.repeat(np.arange(nt), 3)
        local = np.tile(np.arange(3), nt)
        order = np.lexsort((owner, inverse))            # by edge, then triangle
        edge_tris = -np.ones((ne, 2), dtype=np.int64)
        edge_loc = -np.ones((ne, 2), dtype=np.int64)
        first = np.ones(len(order), dtype=bool)
        first[1:] = inverse[order][1:] != inverse[order][:-1]
        e_first, e_second = inverse[order][first], inverse[order][~first]
        edge_tris[e_first, 0] = owner[order][first]
        edge_loc[e_first, 0] = local[order][first]
        edge_tris[e_second, 1] = owner[order][~first]
        edge_loc[e_second, 1] = local[order][~first]
        self.edge_triangles = edge_tris
        self.edge_local = edge_loc
        self.boundary_edges = edge_tris[:, 1] < 0

        a, b = vertices[edges[:, 0]], vertices[edges[:, 1]]
        tang = b - a
        self.edge_lengths = np.hypot(tang[:, 0], tang[:, 1])
        self.edge_midpoints = 0.5 * (a + b)
        self.edge_tangents = tang / self.edge_lengths[:, None]
        normals = np.column_stack([self.edge_tangents[:, 1], -self.edge_tangents[:, 0]])
        opposite = vertices[triangles[edge_tris[:, 0], edge_loc[:, 0]]]
        flip = np.einsum("ij,ij->i", normals, opposite - self.edge_midpoints) > 0
        normals[flip] *= -1.0
        self.normals = normals

        self.boundary_vertices = np.zeros(len(vertices), dtype=bool)
        self.boundary_vertices[edges[self.boundary_edges].ravel()] = True

        lens = self.edge_lengths[self.triangle_edges]     # (nt, 3)
        self.diameters = lens.max(axis=1)
        self.inradii = 2.0 * self.areas / lens.sum(axis=1)
        self.h_max = float(self.diameters.max())
        self.shape_regularity = float(np.max(self.diameters / self.inradii))

        # affine maps x = p0 + B xi
        self.jacobians = np.stack([d1, d2], axis=2)        # (nt, 2, 2), columns d1, d2
        self.inverse_jacobians = np.linalg.inv(self.jacobians)

        _readonly(
            self.vertices, self.triangles, self.areas, self.edges,
            self.triangle_edges, self.edge_triangles, self.edge_local,
            self.boundary_edges, self.edge_lengths, self.edge_midpoints,
            self.edge_tangents, self.normals, self.boundary_vertices,
            self.diameters, self.inradii, self.jacobians, self.inverse_jacobians,
        )
        if self.parents is not None:
            _readonly(self.parents)
        self._check_hanging_nodes()

    def __repr__(self):
        return (f"Triangulation(nv={self.num_vertices}, nt={self.num_triangles}, "
                f"ne={self.num_edges}, h_max={self.h_max:.4g})")

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def interior_vertices(self):
        return np.flatnonzero(~self.boundary_vertices)

    @property
    def interior_edges(self):
        return np.flatnonzero(~self.boundary_edges)

    @property
    def area(self):
        return float(self.areas.sum())

    def vertex_triangle_counts(self):
        """Number of triangles attached to each vertex."""
        return np.bincount(self.triangles.ravel(), minlength=self.num_vertices)

    def hash(self):
        """SHA-256 of the vertex and triangle arrays."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.triangles).tobytes())
        return h.hexdigest()

    def to_physical(self, ref_points):
        """Map reference points ``(npts, 2)`` into every triangle: ``(nt, npts, 2)``."""
        ref_points = np.asarray(ref_points, dtype=float)
        p0 = self.vertices[self.triangles[:, 0]]
        return p0[:, None, :] + np.einsum("kij,qj->kqi", self.jacobians, ref_points)

    def locate(self, point, tol=1e-12):
        """Return ``(K, xi)`` for a triangle containing ``point`` and its reference coordinates.

        Raises ``ValueError`` if the point lies outside the mesh.
        """
        p = np.asarray(point, dtype=float)
        p0 = self.vertices[self.triangles[:, 0]]
        xi = np.einsum("kij,kj->ki", self.inverse_jacobians, p - p0)
        lam = np.column_stack([1.0 - xi.sum(axis=1), xi])
        inside = np.flatnonzero(lam.min(axis=1) >= -tol)
        if len(inside) == 0:
            raise ValueError(f"point {tuple(p)} lies outside the triangulation")
        k = int(inside[0])
        return k, xi[k]

    def _check_hanging_nodes(self):
        bnd = np.flatnonzero(self.boundary_edges)
        if len(bnd) == 0:
            return
        a = self.vertices[self.edges[bnd, 0]]
        t = self.edge_tangents[bnd]
        L = self.edge_lengths[bnd]
        for start in range(0, len(bnd), 512):
            sl = slice(start, start + 512)
            rel = self.vertices[None, :, :] - a[sl, None, :]
            along = np.einsum("eqi,ei->eq", rel, t[sl])
            across = np.abs(rel[..., 0] * t[sl, None, 1] - rel[..., 1] * t[sl, None, 0])
            tol = 1e-12 * L[sl, None]
            hit = (across <= tol) & (along > tol) & (along < L[sl, None] - tol)
            if hit.any():
                e, v = np.argwhere(hit)[0]
                raise MeshError(f"hanging node: vertex {v} lies inside edge {bnd[start + e]}")


def build_structured_square(n):
    """Unit square split into ``n x n`` cells, each cut along its ``(0,0)-(1,1)`` diagonal."""
    n = int(n)
    if n < 1:
        raise ValueError("subdivision count must be at least 1")
    t = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(t, t)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    v0 = (j * (n + 1) + i).ravel()
    v1, v2, v3 = v0 + 1, v0 + n + 2, v0 + n + 1
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([v0, v1, v2])
    triangles[1::2] = np.column_stack([v0, v2, v3])
    return Triangulation(vertices, triangles)


def build_lshape():
    """L-shaped domain (-1,1)^2 minus [0,1)x(-1,0], six triangles fanned from the reentrant corner."""
    vertices = [(0, 0), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1)]
    triangles = [(0, k, k + 1) for k in range(1, 7)]
    return Triangulation(vertices, triangles)


def uniform_refine(mesh, times=1):
    """Red refinement: every triangle is split into four congruent children.

    Children of triangle ``K`` get indices ``4K .. 4K+3``; the corner children
    come first and the middle child last.  ``parents`` of the result points
    back into ``mesh``.
    """
    for _ in range(times):
        nv = mesh.num_vertices
        verts = np.vstack([mesh.vertices, mesh.edge_midpoints])
        a, b, c = mesh.triangles.T
        m0, m1, m2 = (nv + mesh.triangle_edges[:, i] for i in range(3))
        children = np.stack(
            [
                np.column_stack([a, m2, m1]),
                np.column_stack([m2, b, m0]),
                np.column_stack([m1, m0, c]),
                np.column_stack([m0, m1, m2]),
            ],
            axis=1,
        ).reshape(-1, 3)
        parents = np.repeat(np.arange(mesh.num_triangles), 4)
        mesh = Triangulation(verts, children, parents=parents)
    return mesh


def ancestor_map(fine, levels):
    """Index of the ancestor ``levels`` refinements up for every triangle of ``fine``.

    Relies on the child numbering of :func:`uniform_refine`.
    """
    return np.arange(fine.num_triangles) // (4 ** levels)


def containing_triangles(coarse, points, tol=1e-10, chunk=256):
    """Index of a ``coarse`` triangle containing each point; works for any nested pair of meshes.

    Raises :class:`MeshError` when a point lies in no triangle.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.full(len(points), -1)
    p0 = coarse.vertices[coarse.triangles[:, 0]]
    for start in range(0, coarse.num_triangles, chunk):
        sl = slice(start, start + chunk)
        xi = np.einsum("kij,kpj->kpi", coarse.inverse_jacobians[sl], points[None] - p0[sl, None])
        lam_min = np.minimum(1.0 - xi.sum(axis=2), xi.min(axis=2))
        k, p = np.nonzero(lam_min >= -tol)
        out[p] = k + start
    missing = np.flatnonzero(out < 0)
    if len(missing):
        raise MeshError(f"point {tuple(points[missing[0]])} lies outside the coarse mesh")
    return out


def save_mesh(mesh, path):
    """Write the plain-text mesh format: counts header, vertex lines, triangle lines."""
    lines = [f"{mesh.num_vertices} {mesh.num_triangles}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path):
    """Read and validate a mesh file written by :func:`save_mesh`.

    Blank lines and lines starting with ``#`` are ignored.  Raises
    :class:`MeshFormatError` with the 1-based line number of the first
    problem.
    """
    raw = Path(path).read_text().splitlines()
    rows = [(i + 1, ln.split()) for i, ln in enumerate(raw)
            if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows:
        raise MeshFormatError("line 1: empty mesh file")
    lineno, head = rows[0]
    if len(head) != 2:
        raise MeshFormatError(f"line {lineno}: expected '<num_vertices> <num_triangles>'")
    try:
        nv, nt = int(head[0]), int(head[1])
    except ValueError:
        raise MeshFormatError(f"line {lineno}: counts must be integers") from None
    if nv < 3 or nt < 1:
        raise MeshFormatError(f"line {lineno}: need at least 3 vertices and 1 triangle")
    body = rows[1:]
    if len(body) != nv + nt:
        where = body[-1][0] + 1 if body else lineno + 1
        raise MeshFormatError(
            f"line {where}: expected {nv + nt} data lines after header, found {len(body)}")
    vertices = np.empty((nv, 2))
    for r, (ln, tok) in enumerate(body[:nv]):
        if len(tok) != 2:
            raise MeshFormatError(f"line {ln}: vertex line needs 2 coordinates")
        try:
            vertices[r] = [float(tok[0]), float(tok[1])]
        except ValueError:
            raise MeshFormatError(f"line {ln}: invalid coordinate") from None
        if not np.all(np.isfinite(vertices[r])):
            raise MeshFormatError(f"line {ln}: non-finite coordinate")
    triangles = np.empty((nt, 3), dtype=np.int64)
    for r, (ln, tok) in enumerate(body[nv:]):
        if len(tok) != 3:
            raise MeshFormatError(f"line {ln}: triangle line needs 3 vertex indices")
        try:
            triangles[r] = [int(t) for t in tok]
        except ValueError:
            raise MeshFormatError(f"line {ln}: invalid vertex index") from None
        if triangles[r].min() < 0 or triangles[r].max() >= nv:
            raise MeshFormatError(f"line {ln}: vertex index out of range")
        if len(set(triangles[r].tolist())) != 3:
            raise MeshFormatError(f"line {ln}: repeated vertex in triangle")
        p = vertices[triangles[r]]
        d1, d2 = p[1] - p[0], p[2] - p[0]
        if d1[0] * d2[1] - d1[1] * d2[0] <= 0.0:
            raise MeshFormatError(f"line {ln}: triangle is degenerate or clockwise")
    used = np.zeros(nv, dtype=bool)
    used[triangles.ravel()] = True
    if not used.all():
        v = int(np.flatnonzero(~used)[0])
        raise MeshFormatError(f"line {body[v][0]}: vertex {v} is not used by any triangle")
    try:
        return Triangulation(vertices, triangles)
    except MeshError as err:
        first_tri_line = body[nv][0]
        raise MeshFormatError(f"line {first_tri_line}: {err}") from None


def mesh_summary(mesh):
    """Plain dict of counts and size functions, used by the ``mesh-info`` command."""
    return {
        "vertices": mesh.num_vertices,
        "triangles": mesh.num_triangles,
        "edges": mesh.num_edges,
        "interior_vertices": int((~mesh.boundary_vertices).sum()),
        "interior_edges": int((~mesh.boundary_edges).sum()),
        "area": mesh.area,
        "h_max": mesh.h_max,
        "h_min": float(mesh.diameters.min()),
        "shape_regularity": mesh.shape_regularity,
        "hash": mesh.hash(),
    }
