"""Quadrature on the reference triangle and the unit interval.

The reference triangle has vertices (0,0), (1,0), (0,1) and area 1/2.
Triangle rules are collapsed (Duffy) products of Gauss-Jacobi and
Gauss-Legendre rules, so all weights are positive and all points are
strictly interior.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

MAX_TRIANGLE_DEGREE = 14
MAX_EDGE_DEGREE = 10


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Points and positive weights with guaranteed polynomial exactness.

    For triangle rules ``points`` holds barycentric coordinates
    ``(lambda0, lambda1, lambda2)`` with respect to the reference vertices;
    for edge rules it holds the parameter ``s`` in ``[0, 1]``.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __post_init__(self):
        self.points.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def reference_points(self):
        """Cartesian reference coordinates ``(xi, eta)`` (triangle rules only)."""
        return self.points[:, 1:3]

    def __len__(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Rule exact for polynomials of total degree ``<= degree`` on the reference triangle."""
    degree = int(degree)
    if not 1 <= degree <= MAX_TRIANGLE_DEGREE:
        raise ValueError(f"triangle rule degree must lie in [1, {MAX_TRIANGLE_DEGREE}]")
    n = (degree + 2) // 2
    # xi = u, eta = (1-u) v, dxi deta = (1-u) du dv
    xu, wu = roots_jacobi(n, 1.0, 0.0)
    xv, wv = roots_legendre(n)
    u = 0.5 * (1.0 + xu)
    v = 0.5 * (1.0 + xv)
    wu = wu / 4.0
    wv = wv / 2.0
    U, V = np.meshgrid(u, v, indexing="ij")
    xi = U.ravel()
    eta = ((1.0 - U) * V).ravel()
    w = np.outer(wu, wv).ravel()
    bary = np.column_stack([1.0 - xi - eta, xi, eta])
    return QuadratureRule(bary, w, degree)


@lru_cache(maxsize=None)
def edge_rule(degree):
    """Gauss-Legendre rule on ``[0, 1]`` exact to ``degree``."""
    degree = int(degree)
    if not 1 <= degree <= MAX_EDGE_DEGREE:
        raise ValueError(f"edge rule degree must lie in [1, {MAX_EDGE_DEGREE}]")
    n = (degree + 2) // 2
    x, w = roots_legendre(n)
    return QuadratureRule(0.5 * (1.0 + x), 0.5 * w, degree)


# Clough-Tocher split of the reference triangle at its centroid: subtriangle i
# is (centroid, a[i+1], a[i+2]) and holds the points whose smallest
# barycentric coordinate is lambda_i.
REFERENCE_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
REFERENCE_CENTROID = np.array([1.0, 1.0]) / 3.0


def subtriangle_vertices(i):
    a = REFERENCE_VERTICES
    return np.array([REFERENCE_CENTROID, a[(i + 1) % 3], a[(i + 2) % 3]])


@dataclass(frozen=True, eq=False)
class PointSet:
    """Reference points with weights used for all triangles of a mesh.

    ``points`` are Cartesian reference coordinates, ``weights`` sum to 1/2
    and ``sub`` holds the Clough-Tocher subtriangle of each point.
    """

    points: np.ndarray
    weights: np.ndarray
    sub: np.ndarray
    degree: int
    split: bool

    def __len__(self):
        return len(self.weights)


def subtriangle_of(points):
    """Clough-Tocher subtriangle index of reference points (argmin barycentric)."""
    points = np.atleast_2d(points)
    lam = np.column_stack([1.0 - points.sum(axis=1), points])
    return np.argmin(lam, axis=1)


@lru_cache(maxsize=None)
def parent_points(degree):
    rule = triangle_rule(degree)
    pts = np.array(rule.reference_points)
    return PointSet(pts, np.array(rule.weights), subtriangle_of(pts), degree, False)


@lru_cache(maxsize=None)
def split_points(degree):
    """Degree-``degree`` rule on each of the three Clough-Tocher subtriangles."""
    rule = triangle_rule(degree)
    pts, wts, sub = [], [], []
    for i in range(3):
        c, p, q = subtriangle_vertices(i)
        B = np.column_stack([p - c, q - c])
        pts.append(c + rule.reference_points @ B.T)
        wts.append(rule.weights * abs(np.linalg.det(B)))
        sub.append(np.full(len(rule), i))
    return PointSet(np.vstack(pts), np.concatenate(wts), np.concatenate(sub), degree, True)
