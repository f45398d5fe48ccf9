import numpy as np
import pytest
import scipy.sparse as sp

from fourfem.fespace import FeSpace, polynomial_derivatives
from fourfem.forms import (
    SchemeParams, assemble_apw, assemble_consistency, assemble_penalty, broken_consistency,
    broken_jh, broken_penalty_dg, broken_penalty_p, export_coo, is_symmetric, jump_terms,
    norm_matrix, norms, pw_energy_squared, scheme_form,
)
from fourfem.mesh import build_lshape, build_structured_square, uniform_refine
from fourfem.quadrature import split_points
from fourfem.reference import DXX, DXY, DYY
from fourfem.transfer import companion, morley_space

SCHEMES = ("morley", "dg", "c0ip", "wopsip")
MESHES = [build_structured_square(2), build_structured_square(4), build_lshape(),
          uniform_refine(build_lshape(), 1)]


def quad(space, c):
    return space.function(space.interpolate(polynomial_derivatives(c)))


def test_apw_of_x_squared_on_dg(square2):
    V = FeSpace(square2, "dg")
    v = V.interpolate(polynomial_derivatives([[0], [0], [1]]))
    assert v @ assemble_apw(V) @ v == pytest.approx(4.0, rel=1e-13)


def test_apw_kernel_is_piecewise_affine(square2, rng):
    V = FeSpace(square2, "dg")
    A = assemble_apw(V)
    v = V.interpolate(polynomial_derivatives([[1.0, 2.0], [-3.0, 0.0]]))
    assert abs(v @ A @ v) < 1e-12
    # a broken affine field (different plane on each triangle) is in the kernel too
    nodal = np.zeros((square2.num_triangles, 6))
    from fourfem.fespace import P2_NODES
    for K in range(square2.num_triangles):
        a, b, c = rng.standard_normal(3)
        xy = square2.to_physical(P2_NODES)[K]
        nodal[K] = a + b * xy[:, 0] + c * xy[:, 1]
    w = V.from_nodal(nodal)
    assert abs(w @ A @ w) < 1e-11 * (w @ w)


def test_apw_matches_quadrature_norm(square4, rng):
    for scheme in SCHEMES:
        V = FeSpace(square4, scheme)
        v = rng.standard_normal(V.dim)
        via_matrix = v @ assemble_apw(V) @ v
        assert via_matrix == pytest.approx(norms(V.function(v), "pw") ** 2, rel=1e-12)


def test_consistency_symmetry_depends_on_theta(square4):
    for scheme in ("dg", "c0ip"):
        V = FeSpace(square4, scheme)
        assert is_symmetric(assemble_consistency(V, 1.0))
        for theta in (0.0, -1.0, 0.5):
            assert not is_symmetric(assemble_consistency(V, theta))


def test_consistency_vanishes_for_gradient_free_second_slot(square4, rng):
    Jm = broken_consistency(square4)
    V = FeSpace(square4, "dg")
    v = rng.standard_normal(V.dim)
    one = V.interpolate(polynomial_derivatives([[1.0]]))
    assert abs(v @ Jm @ one) < 1e-12 * np.abs(v).max()


def test_consistency_zero_for_morley_and_wopsip(square4):
    for scheme in ("morley", "wopsip"):
        assert assemble_consistency(FeSpace(square4, scheme)).nnz == 0


def test_penalties_vanish_on_conforming_input(square4, rng):
    V = morley_space(square4)
    w = companion(V.function(rng.standard_normal(V.dim)))
    jt = jump_terms(w)
    energy = pw_energy_squared(w)
    for tag in ("h", "dg", "ip", "p"):
        assert jt[tag] <= 1e-18 * energy + 1e-20
    assert norms(w, "h") == pytest.approx(norms(w, "pw"), rel=1e-12)
    assert norms(w, "dg") == pytest.approx(norms(w, "ip"), rel=1e-12)


def test_penalty_dg_hand_case():
    # two triangles; nodal values 1 on the first, 0 on the second:
    # the value jump is 1 on the three edges of the first triangle
    m = build_structured_square(1)
    v = np.zeros(12)
    v[:6] = 1.0
    sigma1 = 20.0
    C = broken_penalty_dg(m, sigma1, 7.0)
    h = m.edge_lengths[m.triangle_edges[0]]
    assert v @ C @ v == pytest.approx(np.sum(sigma1 / h ** 2), rel=1e-13)
    assert np.sum(sigma1 / h ** 2) == pytest.approx(2.5 * sigma1)


def test_wopsip_penalty_vanishes_on_morley(square4, rng):
    V = morley_space(square4)
    E = V.extraction
    C, A = broken_penalty_p(square4), assemble_apw(V)
    for _ in range(5):
        c = rng.standard_normal(V.dim)
        x = E @ c
        assert x @ C @ x <= 1e-13 * (c @ A @ c)


def test_penalty_rejects_nonpositive():
    with pytest.raises(ValueError):
        SchemeParams(sigma1=0.0)
    with pytest.raises(ValueError):
        SchemeParams(sigma_ip=-1.0)
    with pytest.raises(ValueError):
        SchemeParams(theta=1.5)


def test_morley_scheme_form_is_apw(square4):
    V = FeSpace(square4, "morley")
    assert abs(scheme_form(V) - assemble_apw(V)).max() == 0.0


def test_wopsip_scheme_form(square4):
    V = FeSpace(square4, "wopsip")
    diff = scheme_form(V) - assemble_apw(V) - assemble_penalty(V)
    assert abs(diff).max() <= 1e-12 * abs(scheme_form(V)).max()


@pytest.mark.parametrize("mesh", MESHES)
@pytest.mark.parametrize("scheme", SCHEMES)
def test_scheme_form_spd(mesh, scheme):
    A = scheme_form(FeSpace(mesh, scheme)).toarray()
    assert is_symmetric(sp.csr_matrix(A))
    np.linalg.cholesky(0.5 * (A + A.T))
    assert np.linalg.eigvalsh(0.5 * (A + A.T)).min() > 0


def test_norm_definitions(square4, rng):
    p = SchemeParams()
    for scheme, tag in (("dg", "dg"), ("c0ip", "ip"), ("wopsip", "p")):
        V = FeSpace(square4, scheme)
        v = rng.standard_normal(V.dim)
        f = V.function(v)
        pen = v @ assemble_penalty(V, p) @ v
        assert norms(f, tag) ** 2 - norms(f, "pw") ** 2 == pytest.approx(pen, rel=1e-12)
        assert norms(f, tag) ** 2 == pytest.approx(v @ norm_matrix(V, p, tag) @ v, rel=1e-12)
        assert norms(f, "h") ** 2 == pytest.approx(v @ norm_matrix(V, p, "h") @ v, rel=1e-12)


def test_norms_of_zero_and_bad_tag(square2):
    f = FeSpace(square2, "dg").function()
    for tag in ("pw", "h", "dg", "ip", "p"):
        assert norms(f, tag) == 0.0
    with pytest.raises(ValueError):
        norms(f, "H3")


def test_jh_bounded_by_wopsip_penalty(rng):
    m = uniform_refine(build_lshape(), 1)
    hmax2 = m.edge_lengths.max() ** 2
    Jh, Cp = broken_jh(m), broken_penalty_p(m)
    for _ in range(50):
        v = rng.standard_normal(6 * m.num_triangles)
        assert v @ Jh @ v <= hmax2 * (v @ Cp @ v) * (1 + 1e-12)


def test_apw_orthogonal_to_companion_defect(square4, rng):
    VM = morley_space(square4)
    Vd = FeSpace(square4, "dg")
    ps = split_points(14)
    w = 2.0 * square4.areas
    for _ in range(5):
        vm = VM.function(rng.standard_normal(VM.dim))
        defect = vm.tabulate(ps.points, ps.sub) - companion(vm).tabulate(ps.points, ps.sub)
        v2 = Vd.function(rng.standard_normal(Vd.dim)).tabulate(ps.points, ps.sub)
        val = np.einsum("q,kqd,kqd,d,k->", ps.weights, v2[..., [DXX, DXY, DYY]],
                        defect[..., [DXX, DXY, DYY]], np.array([1.0, 2.0, 1.0]), w)
        scale = np.sqrt(pw_energy_squared(vm)) * np.sqrt(Vd.dim)
        assert abs(val) <= 1e-10 * scale


def test_assembly_is_deterministic():
    a = scheme_form(FeSpace(build_structured_square(4), "dg"))
    b = scheme_form(FeSpace(build_structured_square(4), "dg"))
    assert np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
    assert np.array_equal(a.data, b.data)


def test_export_coo(tmp_path, square2):
    A = scheme_form(FeSpace(square2, "c0ip"))
    export_coo(A, tmp_path / "a.txt")
    lines = (tmp_path / "a.txt").read_text().splitlines()
    n, m, nnz = map(int, lines[0][1:].split())
    rows = np.loadtxt(tmp_path / "a.txt", comments="#", ndmin=2)
    B = sp.coo_matrix((rows[:, 2], (rows[:, 0].astype(int), rows[:, 1].astype(int))), shape=(n, m))
    assert nnz == len(rows)
    assert abs(A - B).max() == 0.0
