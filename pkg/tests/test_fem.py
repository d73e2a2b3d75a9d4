import math

import numpy as np
import pytest
import scipy.sparse as sp

from fsishape.errors import SolverError
from fsishape.expr import VectorField, parse_field
from fsishape.fem import (P1, P2VEC, EdgeTrace, Factorization, FunctionSpace, SparseSystem, assemble_interface_form,
                          assemble_volume_form, assemble_volume_vector, compute_norm, error_norms, mass_coef,
                          mean_weights, solve, solve_constrained, stiffness_coef, triangle_rule)
from fsishape.mesh import FLUID, GAMMA0, OUTER, SOLID, Mesh, generate_box_pair_mesh


def unit_triangle(p=((0, 0), (1, 0), (0, 1))):
    return Mesh(np.array(p, float), [[0, 1, 2]], [FLUID], [[0, 1], [1, 2], [2, 0]], [OUTER] * 3)


def test_quadrature_integrates_quartics_exactly():
    bary, w = triangle_rule()
    x, y = bary[:, 1], bary[:, 2]
    # weights sum to 1; reference triangle (area 1/2): integral of x^a y^b = a! b! / (a + b + 2)!
    for a, b in [(0, 0), (2, 1), (4, 0), (2, 2)]:
        exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
        assert 0.5 * np.sum(w * x ** a * y ** b) == pytest.approx(exact, rel=1e-13)


def test_p1_stiffness_on_unit_right_triangle():
    V = FunctionSpace(unit_triangle(), FLUID, P1)
    K = assemble_volume_form(V, V, stiffness_coef(V)).toarray()
    assert np.allclose(K, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-14)


def test_p1_mass_matrix():
    m = unit_triangle(((0.1, 0.2), (2.0, 0.4), (0.3, 1.7)))
    V = FunctionSpace(m, FLUID, P1)
    M = assemble_volume_form(V, V, mass_coef(V)).toarray()
    A = float(m.signed_areas[0])
    assert np.allclose(M, A / 12 * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]), atol=1e-14)


def test_p2_stiffness_annihilates_rigid_translations():
    V = FunctionSpace(generate_box_pair_mesh(3), SOLID, P2VEC)
    K = assemble_volume_form(V, V, stiffness_coef(V))
    t = V.interpolate(VectorField.parse(["1", "0"]))
    assert np.abs(K @ t).max() <= 1e-12


def test_zero_traction_gives_zero_vector(coarse_mesh):
    V = FunctionSpace(coarse_mesh, SOLID, P2VEC)
    tr = EdgeTrace(V, GAMMA0)
    assert not np.any(assemble_interface_form(tr, np.zeros(tr.points.shape)))


def test_constant_traction_integrates_to_perimeter():
    from fsishape.mesh import GeometryConfig, circle, generate_annular_mesh

    m = generate_annular_mesh(GeometryConfig(1.5, 0.2, circle(0.5), 0.15))
    V = FunctionSpace(m, SOLID, P2VEC)
    tr = EdgeTrace(V, GAMMA0)
    trac = np.zeros(tr.points.shape)
    trac[..., 0] = 1.0
    b = assemble_interface_form(tr, trac)
    e1 = V.interpolate(VectorField.parse(["1", "0"]))
    assert b @ e1 == pytest.approx(2 * math.pi * 0.5, rel=1e-2)
    # closed polygon: the normals integrate to zero
    bn = assemble_interface_form(tr, tr.normals[:, None, :] * np.ones(tr.points.shape[:2])[..., None])
    c = V.interpolate(VectorField.parse(["0.7", "-1.3"]))
    assert abs(bn @ c) <= 1e-3


def test_interface_normals_point_out_of_solid(coarse_mesh):
    for region in (SOLID, FLUID):
        tr = EdgeTrace(FunctionSpace(coarse_mesh, region, P2VEC), GAMMA0)
        radial = tr.points / np.linalg.norm(tr.points, axis=2, keepdims=True)
        assert np.all(np.einsum("ek,egk->eg", tr.normals, radial) > 0.95)


def test_solve_identity_and_diagonal():
    b = np.array([3.0, -1.0, 2.5])
    assert np.allclose(solve(SparseSystem(sp.identity(3), b)), b)
    assert np.allclose(solve(SparseSystem(sp.diags([2.0, 4.0]), np.array([2.0, 8.0]))), [1.0, 2.0])


def test_singular_system_is_reported():
    with pytest.raises(SolverError) as ei:
        solve(SparseSystem(sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]])), np.ones(2)))
    assert ei.value.code == "SINGULAR_SYSTEM"


def test_poisson_matches_dense_solve():
    m = generate_box_pair_mesh(4)
    V = FunctionSpace(m, SOLID, P1, dirichlet_tags=(1,))
    K = assemble_volume_form(V, V, stiffness_coef(V))
    rhs = mean_weights(V)
    x = solve_constrained(K, rhs, V.free)
    Kd = K.toarray()[np.ix_(V.free, V.free)]
    xd = np.linalg.solve(Kd, rhs[V.free])
    assert np.abs(x[V.free] - xd).max() <= 1e-12


def test_gauged_pure_neumann_problem():
    m = generate_box_pair_mesh(4)
    V = FunctionSpace(m, SOLID, P1)
    K = assemble_volume_form(V, V, stiffness_coef(V))
    f = V.interpolate(parse_field("cos(3.141592653589793*x)"))
    M = assemble_volume_form(V, V, mass_coef(V))
    x = solve(SparseSystem(K, M @ f, mean_weights(V)))
    assert abs(mean_weights(V) @ x) <= 1e-12


def test_transpose_solve():
    A = sp.csc_matrix(np.array([[4.0, 1.0], [2.0, 3.0]]))
    fac = Factorization(A)
    b = np.array([1.0, 2.0])
    assert np.allclose(A.T @ fac.solve(b, trans=True), b)


def test_norms_of_linear_field():
    m = generate_box_pair_mesh(4)
    V = FunctionSpace(m, SOLID, P1)
    u = V.interpolate(parse_field("x"))
    assert compute_norm(V, np.zeros(V.n_total)) == 0.0
    assert compute_norm(V, u, "L2") == pytest.approx(1 / math.sqrt(3), rel=1e-13)
    assert compute_norm(V, u, "H1-semi") == pytest.approx(1.0, rel=1e-13)
    err = error_norms(V, u, lambda x, y: x, lambda x, y: np.stack([np.ones_like(x), 0 * x], -1))
    assert err["L2"] <= 1e-13 and err["H1-semi"] <= 1e-13


def test_p2_reproduces_quadratics():
    V = FunctionSpace(generate_box_pair_mesh(2), FLUID, P2VEC)
    F = VectorField.parse(["x^2 - x*y", "3*y^2 + 1"])
    u = V.interpolate(F)
    err = error_norms(V, u, lambda x, y: F.eval(x, y), lambda x, y: F.eval_grad(x, y))
    assert err["L2"] <= 1e-13 and err["H1-semi"] <= 1e-12


def test_volume_vector_integrates_constants(coarse_mesh):
    V = FunctionSpace(coarse_mesh, FLUID, P1)
    assert mean_weights(V).sum() == pytest.approx(coarse_mesh.region_area(FLUID), rel=1e-13)
    coef = np.zeros((len(V.cells), V.quad.n_points, 3))
    coef[..., 0] = 2.0
    assert assemble_volume_vector(V, coef).sum() == pytest.approx(2 * coarse_mesh.region_area(FLUID), rel=1e-13)
