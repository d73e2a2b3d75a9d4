import math

import numpy as np
import pytest

from fsishape.expr import VectorField
from fsishape.fem import compute_norm
from fsishape.fsi import FsiState, ProblemData, fsi_fixed_point, solve_perturbed_stokes
from fsishape.kinematics import sym
from fsishape.mesh import SOLID
from fsishape.sensitivity import (EnergyIntegrand, FunctionalSpec, Linearization, ZeroIntegrand,
                                  energy_shape_derivative, eval_functional, shape_derivative_adjoint,
                                  shape_derivative_direct, solve_adjoint, solve_material_derivatives, _vec)
from fsishape.validation import fd_derivative

from conftest import TIGHT

V1 = VectorField.parse(["0.3*bump(0.5,0.0,0.18)", "0.1*bump(0.5,0.0,0.18)"])
V2 = VectorField.parse(["-0.1*bump(0.0,0.5,0.2)", "0.25*bump(0.0,0.5,0.2)"])
CUSTOM = FunctionalSpec.from_expressions("u1^2*x + du12*u2", "sin(x)*u1*u2 + du21^2*y", "CUSTOM")
ENERGY = FunctionalSpec.energy()


@pytest.fixture(scope="module")
def lin(disc, small_data, small_state):
    return Linearization(disc, small_data, small_state)


def _zero_state(disc):
    return FsiState(np.zeros(disc.vf.n_total), np.zeros(disc.qf.n_total), 0.0, np.zeros(disc.ws.n_total),
                    np.zeros(disc.ss.n_total), np.zeros(disc.lifting.space.n_total), disc.transform(None))


def test_functional_of_zero_state(disc):
    assert eval_functional(ENERGY, disc, _zero_state(disc)) == 0.0


def test_energy_fluid_term_at_identity(disc):
    ts = disc.transform(None)
    v, q = solve_perturbed_stokes(disc, ts, ProblemData.parse(["bump(0.9,0.3,0.45)", "0"], ["0", "0"]))
    st = _zero_state(disc)
    st.v = v
    spec = FunctionalSpec(ZeroIntegrand(), EnergyIntegrand(), "fluid energy")
    _, gv = _vec(disc.vf, v)
    e = sym(gv)
    expected = 0.5 * np.sum(disc.vf.quad.weights * np.sum(e * e, axis=(-2, -1)))
    assert eval_functional(spec, disc, st) == pytest.approx(expected, rel=1e-13)


def test_unit_integrand_gives_solid_area(disc):
    spec = FunctionalSpec.from_expressions("1", "0")
    area = eval_functional(spec, disc, _zero_state(disc))
    assert area == pytest.approx(disc.mesh.region_area(SOLID), rel=1e-13)
    assert area == pytest.approx(math.pi * (0.25 - 0.04), rel=5e-2)


def test_jacobian_against_finite_differences(lin):
    sysm = lin.system
    rng = np.random.default_rng(3)
    dX = np.zeros(sysm.n_total)
    dX[sysm.free] = rng.normal(size=len(sysm.free)) * 1e-2
    h = 1e-6
    fd = (sysm.residual(lin.X0 + h * dX) - sysm.residual(lin.X0 - h * dX)) / (2 * h)
    an = sysm.jacobian(lin.X0) @ dX
    fr = sysm.free
    assert np.abs(an[fr] - fd[fr]).max() <= 1e-6 * np.abs(an[fr]).max()


def test_time_derivative_of_residual(lin, disc):
    sysm = lin.system
    V = disc.shape_velocity(V1)
    h = 1e-6
    fd = (sysm.residual(lin.X0, h, V) - sysm.residual(lin.X0, -h, V)) / (2 * h)
    an = sysm.dt_residual(lin.X0, V)
    fr = sysm.free
    assert np.abs(an[fr] - fd[fr]).max() <= 1e-6 * np.abs(an[fr]).max()


def test_state_satisfies_discrete_residual(lin):
    r = lin.system.residual(lin.X0)[lin.system.free]
    assert np.abs(r).max() <= 1e-9


def test_transpose_identity(lin):
    rng = np.random.default_rng(11)
    K = lin.matrix
    for _ in range(10):
        x, y = rng.normal(size=K.shape[0]), rng.normal(size=K.shape[0])
        a, b = (K @ x) @ y, x @ (K.T @ y)
        assert abs(a - b) <= 1e-12 * max(abs(a), 1.0) * 10
    rhs = np.zeros(lin.system.n_total)
    rhs[lin.system.free] = rng.normal(size=K.shape[0])
    y = lin.solve(rhs, trans=True)[lin.system.free]
    assert np.abs(K.T @ y - rhs[lin.system.free]).max() <= 1e-10 * np.abs(rhs).max()


def test_zero_velocity_gives_zero_derivatives(lin, disc):
    V = disc.shape_velocity(VectorField.zero())
    md = solve_material_derivatives(lin, V)
    assert not np.any(md.v) and not np.any(md.w)
    assert shape_derivative_direct(ENERGY, lin, md, V) == 0.0
    assert shape_derivative_adjoint(ENERGY, lin, solve_adjoint(ENERGY, lin), V) == 0.0


def test_material_derivatives_are_linear(lin, disc):
    V = disc.shape_velocity(V1)
    a, b = solve_material_derivatives(lin, V), solve_material_derivatives(lin, V.scaled(2.0))
    assert np.abs(b.v - 2 * a.v).max() <= 1e-10 * np.abs(a.v).max()
    assert np.abs(b.w - 2 * a.w).max() <= 1e-10 * np.abs(a.w).max()


@pytest.mark.parametrize("spec", [ENERGY, CUSTOM], ids=["energy", "custom"])
def test_direct_and_adjoint_agree(lin, disc, spec):
    adj = solve_adjoint(spec, lin)
    for Vf in (V1, V2):
        V = disc.shape_velocity(Vf)
        d = shape_derivative_direct(spec, lin, solve_material_derivatives(lin, V), V)
        a = shape_derivative_adjoint(spec, lin, adj, V)
        assert abs(d - a) <= 1e-9 * abs(d)


def test_direct_derivative_homogeneous_and_odd(lin, disc):
    V = disc.shape_velocity(V1)
    d1 = shape_derivative_direct(CUSTOM, lin, solve_material_derivatives(lin, V), V)
    V2x = V.scaled(2.0)
    d2 = shape_derivative_direct(CUSTOM, lin, solve_material_derivatives(lin, V2x), V2x)
    Vm = V.scaled(-1.0)
    dm = shape_derivative_direct(CUSTOM, lin, solve_material_derivatives(lin, Vm), Vm)
    assert abs(d2 - 2 * d1) <= 1e-10 * abs(d1)
    assert abs(d1 + dm) <= 1e-10 * abs(d1)


def test_energy_specialisation_matches_general_formula(lin, disc):
    V = disc.shape_velocity(V2)
    md = solve_material_derivatives(lin, V)
    assert abs(energy_shape_derivative(lin, md, V) - shape_derivative_direct(ENERGY, lin, md, V)) <= 1e-12 * max(
        abs(energy_shape_derivative(lin, md, V)), 1e-30) + 1e-20


def test_zero_functional_gives_zero_adjoint(lin):
    adj = solve_adjoint(FunctionalSpec.from_expressions("0", "0"), lin)
    assert not np.any(adj.v) and not np.any(adj.w) and not np.any(adj.ell)


def test_central_differences_converge_at_second_order(disc, small_data, lin):
    V = disc.shape_velocity(V1)
    d = shape_derivative_direct(ENERGY, lin, solve_material_derivatives(lin, V), V)
    steps = (1e-2, 5e-3, 2.5e-3)
    errs = [abs(fd_derivative(disc, small_data, [ENERGY], V, t, TIGHT)[0] - d) for t in steps]
    orders = [math.log(a / b, 2) for a, b in zip(errs, errs[1:])]
    assert all(1.8 <= o <= 2.2 for o in orders)


def test_transported_state_at_zero_time_is_reference(disc, small_data, small_state):
    V = disc.shape_velocity(V1)
    st = fsi_fixed_point(disc, small_data, TIGHT, 0.0, V).state
    assert compute_norm(disc.ws, st.w - small_state.w, "H1") <= 1e-12
