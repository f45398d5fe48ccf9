import numpy as np
import pytest
from scipy.signal import convolve2d

from fourfem.fespace import (
    FeSpace, SmoothFunction, edge_traces, polynomial_derivatives, pw_constant_hessian,
)
from fourfem.forms import norms, pw_energy_squared
from fourfem.harness import Combination, fit_rate, norms_of
from fourfem.mesh import build_lshape, build_structured_square, uniform_refine
from fourfem.problems import manufactured
from fourfem.quadrature import split_points
from fourfem.reference import DX, DY, VALUE
from fourfem.transfer import (
    C1Function, apply_smoother, companion, morley_interpolate, morley_space,
    normalize_smoother, transfer_IC,
)

SIN2 = manufactured("sin2", "biharmonic").fields[0].derivatives


def random_morley(mesh, rng):
    V = morley_space(mesh)
    return V.function(rng.standard_normal(V.dim))


def test_projection_property(lshape1, rng):
    vm = random_morley(lshape1, rng)
    assert np.allclose(morley_interpolate(vm).coeffs, vm.coeffs, atol=1e-13)


@pytest.mark.parametrize("mesh", [build_structured_square(2), uniform_refine(build_lshape(), 1)])
def test_right_inverse(mesh, rng):
    for _ in range(3):
        vm = random_morley(mesh, rng)
        back = morley_interpolate(companion(vm))
        assert np.abs(back.coeffs - vm.coeffs).max() <= 1e-12 * max(1.0, np.abs(vm.coeffs).max())


def test_companion_of_zero_is_zero(square2):
    w = companion(morley_space(square2).function())
    assert not w.hct.any() and not w.bubble.any()


def test_companion_orthogonal_to_p2(square2, rng):
    vm = random_morley(square2, rng)
    w = companion(vm)
    ps = split_points(14)
    x = square2.to_physical(ps.points)
    diff = vm.tabulate(ps.points, ps.sub)[..., VALUE] - w.tabulate(ps.points, ps.sub)[..., VALUE]
    scale = np.abs(vm.tabulate(ps.points, ps.sub)[..., VALUE]).max()
    for a, b in [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]:
        p = x[..., 0] ** a * x[..., 1] ** b
        ints = np.einsum("q,kq,k->k", ps.weights, diff * p, 2.0 * square2.areas)
        assert np.abs(ints).max() <= 1e-10 * scale


def test_companion_is_c1_and_clamped(square2, rng):
    vm = random_morley(square2, rng)
    w = companion(vm)
    s = np.linspace(0.0, 1.0, 20)
    tr = edge_traces(w, s)
    inner = ~square2.boundary_edges
    jumps = tr[inner, 0] - tr[inner, 1]
    assert np.abs(jumps[..., [VALUE, DX, DY]]).max() <= 1e-10
    bnd = tr[square2.boundary_edges, 0]
    assert np.abs(bnd[..., [VALUE, DX, DY]]).max() <= 1e-10


def test_companion_vertex_values_and_gradients(square4, rng):
    vm = random_morley(square4, rng)
    w = companion(vm)
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    nt = square4.num_triangles
    cells = np.repeat(np.arange(nt), 3)
    pts = np.tile(corners, (nt, 1))
    wv = w.evaluate_cells(cells, pts).reshape(nt, 3, 6)
    mv = vm.evaluate_cells(cells, pts).reshape(nt, 3, 6)
    assert np.allclose(wv[..., VALUE], mv[..., VALUE], atol=1e-12)
    # gradient at an interior vertex is the mean of the Morley gradients around it
    z = int(square4.interior_vertices[0])
    Ks, loc = np.nonzero(square4.triangles == z)
    mean_grad = mv[Ks, loc][:, [DX, DY]].mean(axis=0)
    assert np.allclose(wv[Ks, loc][:, [DX, DY]], mean_grad, atol=1e-11)


def test_hessian_mean_property(square4, rng):
    # random cubics times the clamped bubble x^2 (1-x)^2 y^2 (1-y)^2 lie in H^2_0
    g = np.array([0.0, 0.0, 1.0, -2.0, 1.0])
    bubble = np.outer(g, g)
    for _ in range(10):
        c = np.zeros((4, 4))
        for a in range(4):
            c[a, : 4 - a] = rng.standard_normal(4 - a)
        f = polynomial_derivatives(convolve2d(c, bubble))
        vm = morley_interpolate(f, square4)
        Hv = pw_constant_hessian(SmoothFunction(square4, f))
        Hm = pw_constant_hessian(vm)
        assert np.allclose(Hv, Hm, atol=1e-10 * max(1.0, np.abs(Hv).max()))


def test_interpolation_energy_rate():
    h, errs = [], []
    for n in (4, 8, 16, 32):
        m = build_structured_square(n)
        e = Combination([(1.0, SmoothFunction(m, SIN2)), (-1.0, morley_interpolate(SIN2, m))])
        h.append(m.h_max)
        errs.append(np.sqrt(pw_energy_squared(e, 10)))
    rate, _ = fit_rate(h, errs, last=4)
    assert rate == pytest.approx(1.0, abs=0.1)


def test_companion_l2_approximation_rate():
    h, errs = [], []
    for n in (4, 8, 16):
        m = build_structured_square(n)
        V = FeSpace(m, "dg")
        v2 = V.function(V.interpolate(SIN2))
        e = Combination([(1.0, v2), (-1.0, apply_smoother("JIM", v2))])
        h.append(m.h_max)
        errs.append(norms_of(e, ["L2"])["L2"])
    rate, _ = fit_rate(h, errs)
    assert rate >= 2.0 - 0.1


def test_transfer_ic_copies_vertices_and_averages_midpoints(square4, rng):
    vm = random_morley(square4, rng)
    ic = transfer_IC(vm)
    assert ic.space.scheme == "c0ip"
    nodal, mn = ic.nodal(), vm.nodal()
    assert np.allclose(nodal[:, :3], mn[:, :3], atol=1e-14)
    e = int(square4.interior_edges[0])
    kp, km = square4.edge_triangles[e]
    lp = square4.edge_local[e, 0]
    lm = square4.edge_local[e, 1]
    assert nodal[kp, 3 + lp] == pytest.approx(0.5 * (mn[kp, 3 + lp] + mn[km, 3 + lm]), abs=1e-14)


def test_transfer_ic_preserves_continuous_midpoints(square4):
    bub = manufactured("poly", "biharmonic").fields[0].derivatives
    vm = morley_interpolate(bub, square4)
    nodal = vm.nodal()
    ic = transfer_IC(vm).nodal()
    checked = 0
    for e in square4.interior_edges:
        (kp, km), (lp, lm) = square4.edge_triangles[e], square4.edge_local[e]
        a, b = nodal[kp, 3 + lp], nodal[km, 3 + lm]
        if abs(a - b) < 1e-14:
            assert ic[kp, 3 + lp] == pytest.approx(a, abs=1e-14)
            checked += 1
    assert checked > 0


def test_transfer_ic_of_zero(square2):
    assert not transfer_IC(morley_space(square2).function()).coeffs.any()


def test_transfer_ic_ratio_bounded():
    ratios = []
    for n in (4, 8, 16):
        m = build_structured_square(n)
        u = SmoothFunction(m, SIN2)
        vm = morley_interpolate(SIN2, m)
        den = np.sqrt(pw_energy_squared(Combination([(1.0, u), (-1.0, vm)]), 10))
        num = norms(Combination([(1.0, u), (-1.0, transfer_IC(vm))]), "h")
        ratios.append(num / den)
    assert max(ratios) < 2.0 and min(ratios) > 0.5


def test_apply_smoother_tags(square2, rng):
    V = FeSpace(square2, "dg")
    v = V.function(rng.standard_normal(V.dim))
    assert apply_smoother("id", v) is v
    once = apply_smoother("IM", v)
    twice = apply_smoother("IM", once)
    assert np.allclose(once.coeffs, twice.coeffs, atol=1e-13)
    vm = random_morley(square2, rng)
    a, b = apply_smoother("JIM", vm), companion(vm)
    assert isinstance(a, C1Function)
    assert np.allclose(a.hct, b.hct) and np.allclose(a.bubble, b.bubble)


def test_unknown_smoother():
    with pytest.raises(ValueError):
        normalize_smoother("JJ")
