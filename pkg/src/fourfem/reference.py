"""Reference-triangle polynomials: P2 Lagrange basis, reduced HCT basis, bubbles.

Polynomials in the reference coordinates ``(xi, eta)`` are stored as 2D
coefficient arrays ``c[i, j]`` of ``xi**i * eta**j``.  Derivative tables use
the component order ``(v, d_xi, d_eta, d_xixi, d_xieta, d_etaeta)``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.signal import convolve2d

from .quadrature import (
    REFERENCE_VERTICES,
    edge_rule,
    split_points,
    subtriangle_of,
    subtriangle_vertices,
)

NDERIV = 6
VALUE, DX, DY, DXX, DXY, DYY = range(NDERIV)

LAMBDA = [
    np.array([[1.0, -1.0], [-1.0, 0.0]]),
    np.array([[0.0, 0.0], [1.0, 0.0]]),
    np.array([[0.0, 1.0], [0.0, 0.0]]),
]

# P2 nodes: vertices, then midpoints of the edges opposite vertex 0, 1, 2
P2_NODES = np.array([
    [0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.0, 0.5], [0.5, 0.0],
])
# outward reference normals of the edges opposite vertex 0, 1, 2
REFERENCE_EDGE_NORMALS = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]) / np.array(
    [[np.sqrt(2.0)], [1.0], [1.0]]
)


def pmul(a, b):
    return convolve2d(a, b)


def padd(a, b):
    n = max(a.shape[0], b.shape[0])
    m = max(a.shape[1], b.shape[1])
    out = np.zeros((n, m))
    out[: a.shape[0], : a.shape[1]] += a
    out[: b.shape[0], : b.shape[1]] += b
    return out


def pscale(a, s):
    return np.asarray(a, dtype=float) * s


def _der(c, i, j):
    if i:
        c = npoly.polyder(c, i, axis=0) if c.shape[0] > i else np.zeros((1, 1))
    if j:
        c = npoly.polyder(c, j, axis=1) if c.shape[1] > j else np.zeros((1, 1))
    return c


def tabulate_poly(c, points):
    """Value and derivatives of polynomial ``c`` at reference points: ``(npts, 6)``."""
    x, y = points[:, 0], points[:, 1]
    orders = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    return np.column_stack([npoly.polyval2d(x, y, _der(c, i, j)) for i, j in orders])


@lru_cache(maxsize=None)
def p2_basis():
    """Coefficient arrays of the six P2 Lagrange basis functions."""
    basis = []
    for i in range(3):
        li = LAMBDA[i]
        basis.append(padd(pscale(pmul(li, li), 2.0), -li))
    for i in range(3):
        basis.append(pscale(pmul(LAMBDA[(i + 1) % 3], LAMBDA[(i + 2) % 3]), 4.0))
    return tuple(basis)


def p2_table(points):
    """Reference derivative table of the P2 basis: ``(npts, 6 basis, 6 derivs)``."""
    points = np.atleast_2d(points)
    return np.stack([tabulate_poly(c, points) for c in p2_basis()], axis=1)


@lru_cache(maxsize=None)
def bubble_squared():
    b = pmul(pmul(LAMBDA[0], LAMBDA[1]), LAMBDA[2])
    return pmul(b, b)


@lru_cache(maxsize=None)
def bubble_basis():
    """``b^2 * l_j`` for the P2 Lagrange basis ``l_j`` (degree 8)."""
    b2 = bubble_squared()
    return tuple(pmul(b2, l) for l in p2_basis())


def bubble_table(points):
    points = np.atleast_2d(points)
    return np.stack([tabulate_poly(c, points) for c in bubble_basis()], axis=1)


def _cubic_monomials():
    return [(i, d - i) for d in range(4) for i in range(d, -1, -1)]


def _cubic_table(points):
    """Derivative table of the 10 cubic monomials: ``(npts, 10, 6)``."""
    mons = _cubic_monomials()
    out = np.zeros((len(points), len(mons), NDERIV))
    for k, (i, j) in enumerate(mons):
        c = np.zeros((4, 4))
        c[i, j] = 1.0
        out[:, k, :] = tabulate_poly(c, points)
    return out


@lru_cache(maxsize=None)
def hct_coefficients():
    """Reduced HCT basis on the reference Clough-Tocher split.

    Returns an array ``(12, 3, 10)``: for each basis function and each
    subtriangle, the coefficients of the cubic monomials.  The twelve
    degrees of freedom are, in order, the values at the three vertices,
    the reference gradients at the three vertices (``d_xi, d_eta`` per
    vertex) and the edge means of the derivative along the outward
    reference normal of the edges opposite vertex 0, 1, 2.
    """
    nmono = 10
    rows_c = []
    t = np.linspace(0.0, 1.0, 5)
    centroid = np.array([1.0, 1.0]) / 3.0
    for j in range(3):
        pts = centroid + np.outer(t, REFERENCE_VERTICES[j] - centroid)
        tab = _cubic_table(pts)
        s1, s2 = (j + 1) % 3, (j + 2) % 3
        for comp in (VALUE, DX, DY):
            row = np.zeros((len(pts), 3 * nmono))
            row[:, s1 * nmono:(s1 + 1) * nmono] = tab[:, :, comp]
            row[:, s2 * nmono:(s2 + 1) * nmono] -= tab[:, :, comp]
            rows_c.append(row)
    C = np.vstack(rows_c)

    D = np.zeros((12, 3 * nmono))
    for j in range(3):
        s = (j + 1) % 3
        tab = _cubic_table(REFERENCE_VERTICES[j:j + 1])[0]
        D[j, s * nmono:(s + 1) * nmono] = tab[:, VALUE]
        D[3 + 2 * j, s * nmono:(s + 1) * nmono] = tab[:, DX]
        D[4 + 2 * j, s * nmono:(s + 1) * nmono] = tab[:, DY]
    rule = edge_rule(5)
    for i in range(3):
        a, b = REFERENCE_VERTICES[(i + 1) % 3], REFERENCE_VERTICES[(i + 2) % 3]
        pts = a + np.outer(rule.points, b - a)
        tab = _cubic_table(pts)
        n = REFERENCE_EDGE_NORMALS[i]
        dn = tab[:, :, DX] * n[0] + tab[:, :, DY] * n[1]
        D[9 + i, i * nmono:(i + 1) * nmono] = rule.weights @ dn

    system = np.vstack([C, D])
    rhs = np.vstack([np.zeros((len(C), 12)), np.eye(12)])
    sol, _, rank, _ = np.linalg.lstsq(system, rhs, rcond=None)
    if rank != 3 * nmono:
        raise RuntimeError("reference HCT system is rank deficient")
    resid = np.abs(system @ sol - rhs).max()
    if resid > 1e-10:
        raise RuntimeError(f"reference HCT constraints violated (residual {resid:.2e})")
    return sol.T.reshape(12, 3, nmono)


def hct_table(points, sub=None):
    """Derivative table of the 12 HCT basis functions at reference points: ``(npts, 12, 6)``."""
    points = np.atleast_2d(points)
    if sub is None:
        sub = subtriangle_of(points)
    coef = hct_coefficients()
    mono = _cubic_table(points)                        # (npts, 10, 6)
    per_sub = np.einsum("ksm,qmd->sqkd", coef, mono)   # (3, npts, 12, 6)
    return per_sub[sub, np.arange(len(points))]


@lru_cache(maxsize=None)
def bubble_correction():
    """Matrices ``(Cv, Cd)`` with bubble coefficients ``q = Cv @ v_nodal - Cd @ hct_dofs``.

    ``q`` makes ``v - (HCT + b^2 q)`` orthogonal to P2 on the reference
    triangle; the affine map scales every integral by the same factor, so
    the same matrices apply on every physical triangle.
    """
    ps = split_points(14)
    P = p2_table(ps.points)[:, :, VALUE]
    H = hct_table(ps.points, ps.sub)[:, :, VALUE]
    Bb = bubble_table(ps.points)[:, :, VALUE]
    w = ps.weights
    gram = np.einsum("q,qj,qk->jk", w, P, Bb)
    mass_pp = np.einsum("q,qj,qk->jk", w, P, P)
    mass_ph = np.einsum("q,qj,qk->jk", w, P, H)
    return np.linalg.solve(gram, mass_pp), np.linalg.solve(gram, mass_ph)


def physical_derivative_maps(inverse_jacobians):
    """Per-triangle ``(nt, 6, 6)`` maps from reference to physical derivative vectors.

    ``phys = A @ ref`` with component order ``(v, x, y, xx, xy, yy)``.
    """
    G = inverse_jacobians
    nt = len(G)
    A = np.zeros((nt, NDERIV, NDERIV))
    A[:, VALUE, VALUE] = 1.0
    # d/dx_b = sum_a G[a, b] d/dxi_a
    A[:, DX, DX] = G[:, 0, 0]
    A[:, DX, DY] = G[:, 1, 0]
    A[:, DY, DX] = G[:, 0, 1]
    A[:, DY, DY] = G[:, 1, 1]
    g00, g01, g10, g11 = G[:, 0, 0], G[:, 0, 1], G[:, 1, 0], G[:, 1, 1]
    A[:, DXX, DXX] = g00 * g00
    A[:, DXX, DXY] = 2.0 * g00 * g10
    A[:, DXX, DYY] = g10 * g10
    A[:, DXY, DXX] = g00 * g01
    A[:, DXY, DXY] = g00 * g11 + g10 * g01
    A[:, DXY, DYY] = g10 * g11
    A[:, DYY, DXX] = g01 * g01
    A[:, DYY, DXY] = 2.0 * g01 * g11
    A[:, DYY, DYY] = g11 * g11
    return A


def edge_reference_points(local_edge, s):
    """Reference coordinates of parameter values ``s`` along local edge ``i`` (from v[i+1] to v[i+2])."""
    a = REFERENCE_VERTICES[(local_edge + 1) % 3]
    b = REFERENCE_VERTICES[(local_edge + 2) % 3]
    return a + np.outer(np.asarray(s, dtype=float), b - a)


__all__ = [
    "NDERIV", "VALUE", "DX", "DY", "DXX", "DXY", "DYY",
    "p2_table", "hct_table", "bubble_table", "hct_coefficients",
    "bubble_correction", "physical_derivative_maps", "edge_reference_points",
    "tabulate_poly", "subtriangle_vertices",
]
