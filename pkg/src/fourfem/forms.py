"""Bilinear forms and discrete norms.

Matrices are first assembled on the broken P2 space (six nodal values per
triangle) and then reduced with the extraction matrix of the space.  Matrix
rows index test functions and columns trial functions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fespace import (
    Evaluable, FeSpace, average_operator, derivative_maps, edge_quadrature,
    edge_traces, jump_operator,
)
from .quadrature import edge_rule, parent_points, split_points
from .reference import DX, DXX, DXY, DY, DYY, VALUE, p2_table

HESS = [DXX, DXY, DYY]
HESS_WEIGHTS = np.array([1.0, 2.0, 1.0])
CONSISTENCY_EDGE_DEGREE = 3
PENALTY_EDGE_DEGREE = 5
NORM_TAGS = ("pw", "h", "dg", "ip", "p")


@dataclass(frozen=True)
class SchemeParams:
    """Penalty parameters and the dG symmetrisation parameter."""

    sigma1: float = 20.0
    sigma2: float = 20.0
    sigma_ip: float = 20.0
    theta: float = 1.0

    def __post_init__(self):
        for name in ("sigma1", "sigma2", "sigma_ip"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be positive, got {val}")
        if not -1.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [-1, 1], got {self.theta}")


def _reduce(space, broken):
    E = space.extraction
    return (E.T @ broken @ E).tocsr()


def _cached(mesh, key, build):
    if key not in mesh._cache:
        mesh._cache[key] = build()
    return mesh._cache[key]


def is_symmetric(A, rtol=1e-12):
    A = sp.csr_matrix(A)
    scale = abs(A).max() if A.nnz else 0.0
    diff = abs(A - A.T).max() if A.nnz else 0.0
    return diff <= rtol * max(scale, np.finfo(float).tiny)


def export_coo(A, path):
    """Write ``row col value`` lines (0-based) preceded by a shape header."""
    A = sp.coo_matrix(A)
    A.sum_duplicates()
    order = np.lexsort((A.col, A.row))
    with open(path, "w") as fh:
        fh.write(f"# {A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for r, c, v in zip(A.row[order], A.col[order], A.data[order]):
            fh.write(f"{r} {c} {float(v)!r}\n")


# --- broken assemblies ------------------------------------------------------------

def broken_hessians(mesh):
    """Constant physical Hessians of the P2 basis: ``(nt, 6, 3)`` (xx, xy, yy)."""
    def build():
        ref = p2_table(np.array([[1 / 3, 1 / 3]]))[0]        # (6b, 6d)
        phys = np.einsum("kij,bj->kbi", derivative_maps(mesh), ref)
        return phys[:, :, HESS]
    return _cached(mesh, "p2_hess", build)


def broken_apw(mesh):
    def build():
        H = broken_hessians(mesh)
        local = np.einsum("k,kbd,d,kcd->kbc", mesh.areas, H, HESS_WEIGHTS, H)
        return _block_diag(local)
    return _cached(mesh, "broken_apw", build)


def _block_diag(blocks):
    from .transfer import _block_diag as bd
    return bd(blocks)


def _edge_weights(mesh, degree, scale=None):
    s, w = edge_quadrature(mesh, degree)
    if scale is not None:
        w = w * np.repeat(scale, len(s))
    return s, sp.diags(w)


def broken_consistency(mesh, normal_only=False):
    """Broken matrix ``Jm`` with ``J(v, w) = v^T Jm w`` for ``J = sum_E int <D^2 v nu> . [grad w]``."""
    def build():
        s, W = _edge_weights(mesh, CONSISTENCY_EDGE_DEGREE)
        if normal_only:
            nu = mesh.normals
            # <d^2 v / d nu^2> [d w / d nu]
            from .fespace import edge_operator
            w = np.zeros((mesh.num_edges, 1, 6))
            w[:, 0, DXX] = nu[:, 0] ** 2
            w[:, 0, DXY] = 2 * nu[:, 0] * nu[:, 1]
            w[:, 0, DYY] = nu[:, 1] ** 2
            half = np.where(mesh.boundary_edges[:, None, None], 1.0, 0.5)
            avg = edge_operator(mesh, s, w * half, w * half)
            return (avg.T @ W @ jump_operator(mesh, s, "normal")).tocsr()
        ax = average_operator(mesh, s, "hess_nu_x")
        ay = average_operator(mesh, s, "hess_nu_y")
        jx = jump_operator(mesh, s, "dx")
        jy = jump_operator(mesh, s, "dy")
        return (ax.T @ W @ jx + ay.T @ W @ jy).tocsr()
    return _cached(mesh, ("broken_J", normal_only), build)


def broken_penalty_dg(mesh, sigma1, sigma2):
    h = mesh.edge_lengths
    s, W1 = _edge_weights(mesh, PENALTY_EDGE_DEGREE, sigma1 / h ** 3)
    _, W2 = _edge_weights(mesh, PENALTY_EDGE_DEGREE, sigma2 / h)
    jv = _cached(mesh, "jump_value_5", lambda: jump_operator(mesh, s, "value"))
    jn = _cached(mesh, "jump_normal_5", lambda: jump_operator(mesh, s, "normal"))
    return (jv.T @ W1 @ jv + jn.T @ W2 @ jn).tocsr()


def broken_penalty_ip(mesh, sigma_ip):
    h = mesh.edge_lengths
    s, W = _edge_weights(mesh, PENALTY_EDGE_DEGREE, sigma_ip / h)
    jn = _cached(mesh, "jump_normal_5", lambda: jump_operator(mesh, s, "normal"))
    return (jn.T @ W @ jn).tocsr()


def _vertex_and_mean_jumps(mesh):
    def build():
        jv = jump_operator(mesh, np.array([0.0, 1.0]), "value")       # (2 ne, 6nt)
        # normal derivatives of P2 functions are affine: edge mean = midpoint value
        jn = jump_operator(mesh, np.array([0.5]), "normal")           # (ne, 6nt)
        return jv, jn
    return _cached(mesh, "vertex_mean_jumps", build)


def broken_penalty_p(mesh, vertex_scale=-4, mean_scale=-2):
    h = mesh.edge_lengths
    jv, jn = _vertex_and_mean_jumps(mesh)
    Wv = sp.diags(np.repeat(h ** vertex_scale, 2))
    Wn = sp.diags(h ** mean_scale)
    return (jv.T @ Wv @ jv + jn.T @ Wn @ jn).tocsr()


def broken_jh(mesh):
    """Broken Gram matrix of the jump seminorm ``j_h``."""
    return _cached(mesh, "broken_jh", lambda: broken_penalty_p(mesh, -2, 0))


# --- reduced matrices ---------------------------------------------------------------

def assemble_apw(space):
    """Piecewise Hessian form ``a_pw(v, w) = sum_K int D^2 v : D^2 w``."""
    return _reduce(space, broken_apw(space.mesh))


def assemble_consistency(space, theta=1.0):
    """Matrix of ``b_h(u, v) = -theta J(u, v) - J(v, u)`` (zero for Morley and WOPSIP)."""
    if space.scheme in ("morley", "wopsip"):
        return sp.csr_matrix((space.dim, space.dim))
    Jm = broken_consistency(space.mesh, normal_only=space.scheme == "c0ip")
    Jr = _reduce(space, Jm)
    # entry (test i, trial j): J(phi_j, phi_i) = Jr[j, i], J(phi_i, phi_j) = Jr[i, j]
    return (-theta * Jr.T - Jr).tocsr()


def assemble_penalty(space, params=None):
    """Penalty form ``c_dG``, ``c_IP`` or ``c_P`` of the scheme (zero for Morley)."""
    params = params or SchemeParams()
    mesh = space.mesh
    if space.scheme == "morley":
        return sp.csr_matrix((space.dim, space.dim))
    if space.scheme == "dg":
        broken = broken_penalty_dg(mesh, params.sigma1, params.sigma2)
    elif space.scheme == "c0ip":
        broken = broken_penalty_ip(mesh, params.sigma_ip)
    else:
        broken = broken_penalty_p(mesh)
    return _reduce(space, broken)


def scheme_form(space, params=None):
    """``a_h = a_pw + b_h + c_h`` with the scheme-specific consistency and penalty terms."""
    params = params or SchemeParams()
    A = assemble_apw(space)
    if space.scheme == "morley":
        return A
    A = A + assemble_penalty(space, params)
    if space.scheme in ("dg", "c0ip"):
        A = A + assemble_consistency(space, params.theta)
    return A.tocsr()


def norm_matrix(space, params=None, which=None):
    """Gram matrix of a discrete norm on ``space``.

    ``which`` defaults to the scheme norm: ``pw`` for Morley, ``dg``,
    ``ip`` and ``p`` for the other schemes.
    """
    params = params or SchemeParams()
    which = which or {"morley": "pw", "dg": "dg", "c0ip": "ip", "wopsip": "p"}[space.scheme]
    return _reduce(space, broken_norm_matrix(space.mesh, which, params))


def broken_norm_matrix(mesh, which, params):
    which = which.lower()
    A = broken_apw(mesh)
    if which == "pw":
        return A
    if which == "h":
        return A + broken_jh(mesh)
    if which == "dg":
        return A + broken_penalty_dg(mesh, params.sigma1, params.sigma2)
    if which == "ip":
        return A + broken_penalty_ip(mesh, params.sigma_ip)
    if which == "p":
        return A + broken_penalty_p(mesh)
    raise ValueError(f"unknown norm {which!r}; expected one of {NORM_TAGS}")


# --- norms of evaluable functions -------------------------------------------------------

def pw_energy_squared(v, degree=None):
    """``|||v|||_pw^2`` by quadrature (split rule for companion outputs)."""
    split = getattr(v, "piecewise_split", False)
    ps = split_points(degree or 14) if split else parent_points(degree or 4)
    d = v.tabulate(ps.points, ps.sub)
    integrand = np.einsum("kqd,d->kq", d[..., HESS] ** 2, HESS_WEIGHTS)
    return float(np.einsum("q,kq,k->", ps.weights, integrand, 2.0 * v.mesh.areas))


def jump_terms(v, params=None, edge_degree=PENALTY_EDGE_DEGREE):
    """Squared jump contributions of ``v`` for every norm: a dict keyed by norm tag."""
    params = params or SchemeParams()
    mesh = v.mesh
    h = mesh.edge_lengths
    nu = mesh.normals

    def jumps(s):
        tr = edge_traces(v, s)
        j = tr[:, 0] - tr[:, 1]
        return j[..., VALUE], j[..., DX] * nu[:, None, 0] + j[..., DY] * nu[:, None, 1]

    rule = edge_rule(edge_degree)
    jv, jn = jumps(rule.points)
    int_v2 = np.einsum("q,eq->e", rule.weights, jv ** 2) * h
    int_n2 = np.einsum("q,eq->e", rule.weights, jn ** 2) * h
    mean_n = np.einsum("q,eq->e", rule.weights, jn)
    vert, _ = jumps(np.array([0.0, 1.0]))
    vert2 = (vert ** 2).sum(axis=1)
    return {
        "pw": 0.0,
        "h": float(np.sum(vert2 / h ** 2) + np.sum(mean_n ** 2)),
        "dg": float(np.sum(params.sigma1 / h ** 3 * int_v2) + np.sum(params.sigma2 / h * int_n2)),
        "ip": float(np.sum(params.sigma_ip / h * int_n2)),
        "p": float(np.sum(vert2 / h ** 4) + np.sum(mean_n ** 2 / h ** 2)),
    }


def norms(v, which="h", params=None):
    """Discrete norm of an evaluable function.

    ``which`` is one of ``pw`` (piecewise energy), ``h`` (energy plus the
    jump seminorm ``j_h``), ``dg``, ``ip`` or ``p``.
    """
    which = str(which).lower()
    if which not in NORM_TAGS:
        raise ValueError(f"unknown norm {which!r}; expected one of {NORM_TAGS}")
    if not isinstance(v, Evaluable):
        raise TypeError("norms expects an evaluable function")
    total = pw_energy_squared(v)
    if which != "pw":
        total += jump_terms(v, params)[which]
    return float(np.sqrt(max(total, 0.0)))


def jh_squared(v):
    return jump_terms(v)["h"]


__all__ = [
    "SchemeParams", "assemble_apw", "assemble_consistency", "assemble_penalty",
    "scheme_form", "norm_matrix", "norms", "pw_energy_squared", "jump_terms",
    "is_symmetric", "export_coo", "FeSpace",
]
