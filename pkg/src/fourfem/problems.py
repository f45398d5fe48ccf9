"""Residual and Jacobian assembly for the biharmonic, stream-function Navier-Stokes
and von Karman problems, plus the manufactured-solution catalog.

The nonlinear terms are quadratic: the residual for test function ``v`` is

    a_h(u, v) + Gamma(R u, R u, S v) - F(J I_M v)

with smoothers ``R, S`` in ``{id, IM, JIM}``.  Each trilinear form is a sum
of terms ``coef * int (l_a . D phi_a)(l_b . D chi_b)(l_c . D psi_c)`` where
``D`` is the derivative vector ``(v, x, y, xx, xy, yy)``, ``l`` are fixed
weight vectors and the subscripts pick the vector component (von Karman
unknowns have two components).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fespace import Evaluable, FeSpace, SmoothFunction, derivative_maps
from .forms import SchemeParams, norm_matrix, scheme_form
from .quadrature import parent_points, split_points
from .reference import DX, DXX, DXY, DY, DYY, NDERIV, VALUE
from .transfer import (
    C1Function, _block_diag, c1_reference_table, normalize_smoother, smoother_operator,
)

KINDS = ("biharmonic", "navier_stokes", "von_karman")
CHUNK = 256


def _vec(**kw):
    v = np.zeros(NDERIV)
    names = {"v": VALUE, "x": DX, "y": DY, "xx": DXX, "xy": DXY, "yy": DYY}
    for k, val in kw.items():
        v[names[k]] = val
    return v


LAPLACE = _vec(xx=1.0, yy=1.0)
D_X, D_Y, VAL = _vec(x=1.0), _vec(y=1.0), _vec(v=1.0)

# Gamma(phi, chi, psi) = int Lap(phi) (chi_y psi_x - chi_x psi_y)
NS_TERMS = [
    (1.0, 0, LAPLACE, 0, D_Y, 0, D_X),
    (-1.0, 0, LAPLACE, 0, D_X, 0, D_Y),
]


def _gamma_terms(sign, a, b, c):
    """Terms of ``sign * gamma(eta_a, chi_b, phi_c)``, ``gamma = -1/2 int [eta, chi] phi``."""
    XX, YY, XY = _vec(xx=1.0), _vec(yy=1.0), _vec(xy=1.0)
    return [
        (-0.5 * sign, a, XX, b, YY, c, VAL),
        (-0.5 * sign, a, YY, b, XX, c, VAL),
        (1.0 * sign, a, XY, b, XY, c, VAL),
    ]


# Gamma(Xi, Theta, Phi) = gamma(xi1, theta2, phi1) + gamma(xi2, theta1, phi1) - gamma(xi1, theta1, phi2)
VK_TERMS = _gamma_terms(1.0, 0, 1, 0) + _gamma_terms(1.0, 1, 0, 0) + _gamma_terms(-1.0, 0, 0, 1)


def _normalize_kind(kind):
    key = str(kind).strip().lower().replace("-", "_").replace(" ", "_")
    aliases = {"biharmonic": "biharmonic", "ns": "navier_stokes",
               "navier_stokes": "navier_stokes", "vk": "von_karman", "von_karman": "von_karman"}
    if key not in aliases:
        raise ValueError(f"unknown problem kind {kind!r}; expected one of {KINDS}")
    return aliases[key]


# --- sources --------------------------------------------------------------------

@dataclass(frozen=True)
class SourceFunctional:
    """Right-hand side functional: a density ``f(x, y)`` or a point load.

    Use :meth:`density`, :meth:`point` or :meth:`zero` to build one.
    """

    kind: str
    f: object = None
    location: tuple = None
    magnitude: float = 0.0
    name: str = ""

    @classmethod
    def density(cls, f, name="density"):
        return cls("density", f=f, name=name)

    @classmethod
    def point(cls, location, magnitude=1.0):
        loc = tuple(float(t) for t in location)
        if len(loc) != 2:
            raise ValueError("point load location must have two coordinates")
        return cls("point", location=loc, magnitude=float(magnitude), name="point")

    @classmethod
    def zero(cls):
        return cls("zero", name="zero")


def _point_in_interior(mesh, z, tol=1e-12):
    K, xi = mesh.locate(z)
    lam = np.array([1.0 - xi.sum(), xi[0], xi[1]])
    if lam.min() <= tol:
        # on an inner edge or vertex: only boundary edges/vertices are outside the open domain
        for e in np.flatnonzero(mesh.boundary_edges):
            a, b = mesh.vertices[mesh.edges[e]]
            t = b - a
            rel = np.asarray(z) - a
            s = rel @ t / (t @ t)
            if -tol <= s <= 1 + tol and abs(rel[0] * t[1] - rel[1] * t[0]) <= tol * (t @ t):
                raise ValueError(f"point load at {tuple(z)} lies on the boundary")
    return K, xi


def apply_source(F, w):
    """``F(w)`` for a companion output (or any evaluable function) ``w``."""
    mesh = w.mesh
    if F.kind == "zero":
        return 0.0
    if F.kind == "point":
        try:
            K, xi = _point_in_interior(mesh, F.location)
        except ValueError as err:
            raise ValueError(f"point load outside the domain: {err}") from None
        return F.magnitude * float(w.evaluate_cells(np.array([K]), xi[None, :])[0, VALUE])
    ps = split_points(14)
    x = mesh.to_physical(ps.points)
    fv = np.asarray(F.f(x[..., 0], x[..., 1]), dtype=float)
    wv = w.tabulate(ps.points, ps.sub)[..., VALUE]
    return float(np.einsum("q,kq,kq,k->", ps.weights, fv, wv, 2.0 * mesh.areas))


def load_vector(F, space):
    """Vector ``F(J I_M phi_j)`` over the basis of ``space``."""
    op = smoother_operator("JIM", space)
    mesh = space.mesh
    nt = mesh.num_triangles
    if F.kind == "zero":
        return np.zeros(space.dim)
    local = np.zeros((nt, 18))
    if F.kind == "point":
        K, xi = _point_in_interior(mesh, F.location)
        local[K] = F.magnitude * c1_reference_table(xi[None, :])[0, :, VALUE]
    else:
        ps = split_points(14)
        x = mesh.to_physical(ps.points)
        fv = np.asarray(F.f(x[..., 0], x[..., 1]), dtype=float)
        tab = c1_reference_table(ps.points, ps.sub)[:, :, VALUE]     # (npts, 18)
        local = np.einsum("q,kq,qi,k->ki", ps.weights, fv, tab, 2.0 * mesh.areas)
    return op.matrix.T @ local.ravel()


# --- trilinear forms on evaluable functions ----------------------------------------------

def _common_points(*funcs):
    split = any(getattr(f, "piecewise_split", False) for f in funcs)
    return split_points(14) if split else parent_points(4)


def _integrate_terms(terms, slots, mesh):
    """Integrate a trilinear term list for evaluable arguments ``slots = (first, second, third)``.

    Each slot is a list of evaluable components.
    """
    flat = [f for slot in slots for f in slot]
    ps = _common_points(*flat)
    cache = {}

    def tab(f):
        if id(f) not in cache:
            cache[id(f)] = f.tabulate(ps.points, ps.sub)
        return cache[id(f)]

    w = ps.weights[None, :] * 2.0 * mesh.areas[:, None]
    total = 0.0
    for coef, a, la, b, lb, c, lc in terms:
        total += coef * np.sum(w * (tab(slots[0][a]) @ la) * (tab(slots[1][b]) @ lb)
                               * (tab(slots[2][c]) @ lc))
    return float(total)


def ns_trilinear(phi, chi, psi):
    """``Gamma_pw(phi, chi, psi) = sum_K int Lap(phi) (chi_y psi_x - chi_x psi_y)``."""
    return _integrate_terms(NS_TERMS, ([phi], [chi], [psi]), phi.mesh)


def vk_bracket(eta, chi):
    """Pointwise von Karman bracket ``[eta, chi]`` as a function of reference points.

    Returns a callable ``bracket(ref_points, sub=None) -> (nt, npts)``.
    """
    def bracket(ref_points, sub=None):
        a = eta.tabulate(ref_points, sub)
        b = chi.tabulate(ref_points, sub)
        return (a[..., DXX] * b[..., DYY] + a[..., DYY] * b[..., DXX]
                - 2.0 * a[..., DXY] * b[..., DXY])
    return bracket


def vk_gamma(eta, chi, phi):
    """``gamma_pw(eta, chi, phi) = -1/2 sum_K int [eta, chi] phi``."""
    return _integrate_terms(_gamma_terms(1.0, 0, 0, 0), ([eta], [chi], [phi]), eta.mesh)


def vk_vector_gamma(Xi, Theta, Phi):
    """Vector form ``gamma(xi1, th2, ph1) + gamma(xi2, th1, ph1) - gamma(xi1, th1, ph2)``."""
    return _integrate_terms(VK_TERMS, (list(Xi), list(Theta), list(Phi)), Xi[0].mesh)


# --- problem specification and assembly -----------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    """Problem kind, scheme, smoothers and right-hand side.

    ``source`` holds one :class:`SourceFunctional` per unknown component
    (two for von Karman).  The source smoother is always ``J I_M``.
    """

    kind: str
    scheme: str
    params: SchemeParams = field(default_factory=SchemeParams)
    R: str = "JIM"
    S: str = "JIM"
    source: tuple = ()
    tol: float = 1e-10
    max_iter: int = 30

    def __post_init__(self):
        object.__setattr__(self, "kind", _normalize_kind(self.kind))
        object.__setattr__(self, "R", normalize_smoother(self.R))
        object.__setattr__(self, "S", normalize_smoother(self.S))
        src = self.source
        if isinstance(src, SourceFunctional):
            src = (src,)
        src = tuple(src)
        ncomp = 2 if self.kind == "von_karman" else 1
        if len(src) == 0:
            src = (SourceFunctional.zero(),) * ncomp
        if len(src) == 1 and ncomp == 2:
            src = (src[0], SourceFunctional.zero())
        if len(src) != ncomp:
            raise ValueError(f"{self.kind} needs {ncomp} source component(s)")
        object.__setattr__(self, "source", src)

    @property
    def components(self):
        return 2 if self.kind == "von_karman" else 1


class DiscreteProblem:
    """Assembled discrete problem on one mesh.

    Attributes
    ----------
    space : FeSpace
    size : int
        Number of unknowns (``components * space.dim``).
    matrix : scipy.sparse.csr_matrix
        Block-diagonal ``a_h``.
    load : ndarray
        ``F(J I_M phi)`` for every basis function.
    gram : scipy.sparse.csr_matrix
        Block-diagonal Gram matrix of the scheme norm.
    """

    def __init__(self, spec, mesh):
        self.spec = spec
        self.mesh = mesh
        self.space = FeSpace(mesh, spec.scheme)
        nc = spec.components
        self.ncomp = nc
        self.size = nc * self.space.dim
        A = scheme_form(self.space, spec.params)
        self.scheme_matrix = A
        self.matrix = sp.block_diag([A] * nc, format="csr")
        M = norm_matrix(self.space, spec.params)
        self.gram = sp.block_diag([M] * nc, format="csr")
        self.load = np.concatenate([load_vector(F, self.space) for F in spec.source])
        self.terms = {"biharmonic": [], "navier_stokes": NS_TERMS,
                      "von_karman": VK_TERMS}[spec.kind]
        self.R = smoother_operator(spec.R, self.space)
        self.S = smoother_operator(spec.S, self.space)
        use_split = "c1" in (self.R.kind, self.S.kind)
        self.points = split_points(14) if use_split else parent_points(4)
        self._linear_lu = None

    def split(self, x):
        x = np.asarray(x, dtype=float).ravel()
        if x.shape != (self.size,):
            raise ValueError(f"expected {self.size} coefficients, got {x.size}")
        d = self.space.dim
        return [x[i * d:(i + 1) * d] for i in range(self.ncomp)]

    # -- nonlinear part ------------------------------------------------------------------
    def _tables(self, op, cells):
        ps = self.points
        ref = op.reference_table(ps.points, ps.sub)                   # (npts, n, 6)
        A = derivative_maps(self.mesh)[cells]
        return np.einsum("kij,qnj->kqni", A, ref, optimize=True)      # (chunk, npts, n, 6)

    def _nonlinear(self, x, want_jacobian):
        """Nonlinear residual and, optionally, its derivative on the middle spaces.

        The derivative is returned as the block matrix ``G`` with
        ``DGamma = Ys^T G Yr`` where ``Y`` are the smoothers' middle maps.
        """
        nt = self.mesh.num_triangles
        nR, nS = self.R.ncoef, self.S.ncoef
        nc = self.ncomp
        coeff = [(self.R.matrix @ xc).reshape(nt, nR) for xc in self.split(x)]
        res_local = [np.zeros((nt, nS)) for _ in range(nc)]
        jac_local = {(c, a): np.zeros((nt, nS, nR)) for c in range(nc) for a in range(nc)}
        ps = self.points
        for start in range(0, nt, CHUNK):
            cells = np.arange(start, min(start + CHUNK, nt))
            TR = self._tables(self.R, cells)
            TS = TR if self.S is self.R else self._tables(self.S, cells)
            w = ps.weights[None, :] * (2.0 * self.mesh.areas[cells])[:, None]
            U = [np.einsum("kqnd,kn->kqd", TR, coeff[c][cells]) for c in range(nc)]
            # terms sharing a test derivative are summed before the contraction
            res_acc, jac_acc, proj_R, proj_S = {}, {}, {}, {}
            for coef, a, la, b, lb, c, lc in self.terms:
                ua, ub = U[a] @ la, U[b] @ lb                    # (chunk, npts)
                lc_key = lc.tobytes()
                if lc_key not in proj_S:
                    proj_S[lc_key] = TS @ lc                      # (chunk, npts, nS)
                key = (c, lc_key)
                res_acc[key] = res_acc.get(key, 0.0) + coef * w * ua * ub
                if not want_jacobian:
                    continue
                for col, l, other in ((a, la, ub), (b, lb, ua)):
                    l_key = l.tobytes()
                    if l_key not in proj_R:
                        proj_R[l_key] = TR @ l                    # (chunk, npts, nR)
                    Y = (coef * w * other)[..., None] * proj_R[l_key]
                    jkey = (c, col, lc_key)
                    jac_acc[jkey] = jac_acc[jkey] + Y if jkey in jac_acc else Y
            for (c, lc_key), wq in res_acc.items():
                res_local[c][cells] += np.einsum("kq,kqj->kj", wq, proj_S[lc_key])
            for (c, col, lc_key), Y in jac_acc.items():
                jac_local[(c, col)][cells] += np.matmul(proj_S[lc_key].transpose(0, 2, 1), Y)
        res = np.concatenate([self.S.matrix.T @ r.ravel() for r in res_local])
        if not want_jacobian:
            return res, None
        WS, WR = self.S.local, self.R.local
        blocks = [[(WS.T @ _block_diag(jac_local[(c, a)]) @ WR) for a in range(nc)]
                  for c in range(nc)]
        return res, sp.bmat(blocks, format="csr")

    def _middle(self, op):
        if op.middle is None:
            return None
        return sp.block_diag([op.middle] * self.ncomp, format="csr")

    def nonlinear_residual(self, x):
        if not self.terms:
            return np.zeros(self.size)
        return self._nonlinear(x, False)[0]

    def residual(self, x):
        """``N_h(x)`` over all free dofs."""
        r = self.matrix @ np.asarray(x, dtype=float) - self.load
        if self.terms:
            r = r + self.nonlinear_residual(x)
        return r

    def linearize(self, x):
        """``(N_h(x), DN_h(x), nonlinear part of N_h(x))`` with ``DN_h`` as a factored operator."""
        from .solver import FactoredOperator
        x = np.asarray(x, dtype=float)
        if not self.terms:
            return self.matrix @ x - self.load, FactoredOperator(self.matrix), np.zeros(self.size)
        nl, G = self._nonlinear(x, True)
        op = FactoredOperator(self.matrix, G, self._middle(self.S), self._middle(self.R),
                              preconditioner=self.linear_solver)
        return self.matrix @ x - self.load + nl, op, nl

    @property
    def linear_solver(self):
        """Cached sparse LU solve with the linear part ``a_h``."""
        if self._linear_lu is None:
            from .solver import _factorize
            self._linear_lu = _factorize(self.matrix)
        return self._linear_lu.solve

    def jacobian(self, x):
        """Exact Frechet derivative ``DN_h(x)`` as an assembled sparse matrix."""
        return self.linearize(x)[1].assembled()

    def functions(self, x):
        from .fespace import FeFunction
        return [FeFunction(self.space, xc) for xc in self.split(x)]


def residual(problem, x):
    return problem.residual(x)


def jacobian(problem, x):
    return problem.jacobian(x)


# --- manufactured solutions -----------------------------------------------------------------

class Profile:
    """One-dimensional factor ``g`` with derivatives through order 4."""

    def __init__(self, name, derivs):
        self.name = name
        self.derivs = derivs            # list of 5 callables

    def __call__(self, order, t):
        return self.derivs[order](np.asarray(t, dtype=float))


def _sin2_profile():
    p = np.pi
    return Profile("sin2", [
        lambda t: np.sin(p * t) ** 2,
        lambda t: p * np.sin(2 * p * t),
        lambda t: 2 * p ** 2 * np.cos(2 * p * t),
        lambda t: -4 * p ** 3 * np.sin(2 * p * t),
        lambda t: -8 * p ** 4 * np.cos(2 * p * t),
    ])


def _poly_profile(name, coeffs):
    P = np.polynomial.Polynomial(coeffs)
    return Profile(name, [P.deriv(k) if k else P for k in range(5)])


class ManufacturedField:
    """``u(x, y) = scale * g(x) * g(y)`` with all partial derivatives through order 4."""

    def __init__(self, profile, scale=1.0):
        self.profile = profile
        self.scale = float(scale)

    def partial(self, a, b, x, y):
        return self.scale * self.profile(a, x) * self.profile(b, y)

    def derivatives(self, x, y):
        """``(..., 6)`` vector ``(u, u_x, u_y, u_xx, u_xy, u_yy)``."""
        orders = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
        return np.stack([self.partial(a, b, x, y) for a, b in orders], axis=-1)

    def laplacian(self, x, y):
        return self.partial(2, 0, x, y) + self.partial(0, 2, x, y)

    def laplacian_gradient(self, x, y):
        return (self.partial(3, 0, x, y) + self.partial(1, 2, x, y),
                self.partial(2, 1, x, y) + self.partial(0, 3, x, y))

    def bilaplacian(self, x, y):
        return (self.partial(4, 0, x, y) + 2 * self.partial(2, 2, x, y)
                + self.partial(0, 4, x, y))

    def on(self, mesh):
        return SmoothFunction(mesh, self.derivatives)


def bracket_closed_form(u, v, x, y):
    return (u.partial(2, 0, x, y) * v.partial(0, 2, x, y) + u.partial(0, 2, x, y) * v.partial(2, 0, x, y)
            - 2.0 * u.partial(1, 1, x, y) * v.partial(1, 1, x, y))


@dataclass(frozen=True)
class ManufacturedSolution:
    """Closed-form exact solution (one field, or two for von Karman) on a named domain."""

    name: str
    domain: str
    fields: tuple

    def sources(self, kind):
        """Source densities of the strong form for problem ``kind`` (viscosity 1)."""
        kind = _normalize_kind(kind)
        u = self.fields[0]
        if kind == "biharmonic":
            return (SourceFunctional.density(u.bilaplacian, f"{self.name}:bilaplacian"),)
        if kind == "navier_stokes":
            def f(x, y):
                lx, ly = u.laplacian_gradient(x, y)
                return u.bilaplacian(x, y) + u.partial(1, 0, x, y) * ly - u.partial(0, 1, x, y) * lx
            return (SourceFunctional.density(f, f"{self.name}:navier_stokes"),)
        if len(self.fields) != 2:
            raise ValueError(f"manufactured solution {self.name!r} has a single field")
        v = self.fields[1]

        def f(x, y):
            return u.bilaplacian(x, y) - bracket_closed_form(u, v, x, y)

        def g(x, y):
            return v.bilaplacian(x, y) + 0.5 * bracket_closed_form(u, u, x, y)

        return (SourceFunctional.density(f, f"{self.name}:vk1"),
                SourceFunctional.density(g, f"{self.name}:vk2"))

    def on(self, mesh):
        return [fld.on(mesh) for fld in self.fields]


def _catalog():
    sin2 = ManufacturedField(_sin2_profile())
    poly = ManufacturedField(_poly_profile("poly", [0, 0, 1, -2, 1]))         # t^2 (1-t)^2
    lpoly = ManufacturedField(_poly_profile("lpoly", [0, 0, 1, 0, -2, 0, 1]))  # t^2 (1-t^2)^2
    return {
        "sin2": ManufacturedSolution("sin2", "square", (sin2,)),
        "poly": ManufacturedSolution("poly", "square", (poly,)),
        "lshape_poly": ManufacturedSolution("lshape_poly", "lshape", (lpoly,)),
        "vk_sin2_poly": ManufacturedSolution(
            "vk_sin2_poly", "square",
            (sin2, ManufacturedField(_poly_profile("poly", [0, 0, 1, -2, 1]), 16.0))),
        "zero": ManufacturedSolution(
            "zero", "square", (ManufacturedField(Profile("zero", [lambda t: 0.0 * t] * 5)),)),
    }


CATALOG = _catalog()


def manufactured(name, kind=None):
    """Catalog entry by name; von Karman problems need a two-field entry."""
    if name not in CATALOG:
        raise ValueError(f"unknown manufactured solution {name!r}; known: {sorted(CATALOG)}")
    sol = CATALOG[name]
    if kind is not None and _normalize_kind(kind) == "von_karman" and len(sol.fields) == 1:
        f = sol.fields[0]
        sol = ManufacturedSolution(name, sol.domain, (f, f))
    return sol


__all__ = [
    "KINDS", "SourceFunctional", "ProblemSpec", "DiscreteProblem", "apply_source", "load_vector",
    "ns_trilinear", "vk_bracket", "vk_gamma", "vk_vector_gamma", "residual", "jacobian",
    "ManufacturedSolution", "ManufacturedField", "manufactured", "CATALOG", "C1Function",
    "Evaluable",
]
