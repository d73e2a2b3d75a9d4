"""Shape functionals, material derivatives, adjoint states and shape derivatives.

The coupled discrete problem is written as one residual R(t, X) = 0 in the
unknown X = (v, q, lam, w, s, ell), where ``lam`` is the pressure-gauge
multiplier and ``ell`` the lifted displacement (its equations say ell is the
discrete harmonic extension of the trace of w).  With T = id + tV + ell on
the fluid and Phi_t = id + tV on the solid, the residual rows are

    R_v   = nu (grad v) F(A) : grad 𝔳 - q G(A) : grad 𝔳 - J(A) f(T) . 𝔳
    R_q   = -𝔮 G(A) : grad v + lam 𝔮
    R_lam = q
    R_w   = mu (grad w) F(B) : grad 𝔴 - s G(B) : grad 𝔴 - J(B) g(Phi_t) . 𝔴
            - [𝔴 . (nu (grad v) F(A) - q G(A)) n0]_GAMMA0
    R_s   = -𝔰 G(B) : grad w
    R_ell = extension equations

(integrated over the fluid / solid), A = grad T, B = grad Phi_t.

* Material derivatives solve  D_X R . Xdot = -D_t R  (at t = 0).
* The adjoint solves          D_X R^T . Y  = -D_X j.
* Direct derivative:  j'(0) = D_t j + D_X j . Xdot, evaluated as pointwise
  integrals of the material-derivative fields.
* Adjoint derivative: j'(0) = D_t j + <Y, D_t R>, the second term evaluated
  as pointwise integrals of the adjoint fields against the t-variations of
  J, G, F and of the loads.
Both are contractions of the same discrete linearisation, so they agree to
solver precision.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import SolverError
from .expr import Expr, VectorField, diff, evaluate, parse_field
from .fem import (Factorization, assemble_edge_form, assemble_volume_form, assemble_volume_vector, field_jets,
                  split_vector_jet, stiffness_coef)
from .fsi import (Discretization, FsiState, ProblemData, divergence_coef, fluid_operator, structure_operator)
from .kinematics import (ShapeVelocity, TransformState, build_transform, cof2, dF, dG, dJ, inv2, sym, variation_tensors)

# ---------------------------------------------------------------------------
# Functionals
# ---------------------------------------------------------------------------

INTEGRAND_VARIABLES = ("x", "y", "u1", "u2", "du11", "du12", "du21", "du22")


@dataclass
class IntegrandValues:
    val: np.ndarray          # (...)
    D1: np.ndarray           # d/d(position)  (..., 2)
    D2: np.ndarray           # d/du           (..., 2)
    D3: np.ndarray           # d/d(grad u)    (..., 2, 2)


class Integrand:
    """Pointwise integrand j(Y, u, Du) with its partial derivatives."""

    def __call__(self, pos: np.ndarray, u: np.ndarray, Du: np.ndarray) -> IntegrandValues:  # pragma: no cover
        raise NotImplementedError

    @property
    def is_zero(self) -> bool:
        return False


class EnergyIntegrand(Integrand):
    """j = 1/2 |sym Du|^2."""

    def __call__(self, pos, u, Du):
        e = sym(Du)
        return IntegrandValues(0.5 * np.sum(e * e, axis=(-2, -1)), np.zeros_like(pos), np.zeros_like(u), e)

    def __repr__(self):
        return "EnergyIntegrand()"


class ZeroIntegrand(Integrand):
    def __call__(self, pos, u, Du):
        return IntegrandValues(np.zeros(pos.shape[:-1]), np.zeros_like(pos), np.zeros_like(u), np.zeros_like(Du))

    @property
    def is_zero(self) -> bool:
        return True


class ExpressionIntegrand(Integrand):
    """Integrand given by an expression in x, y, u1, u2, du11, du12, du21, du22
    (du_ij = d u_i / d x_j); partials are symbolic."""

    def __init__(self, source: str | Expr):
        self.expr = parse_field(source, INTEGRAND_VARIABLES) if isinstance(source, str) else source
        self.partials = {v: diff(self.expr, v) for v in INTEGRAND_VARIABLES}

    def _env(self, pos, u, Du):
        return {"x": pos[..., 0], "y": pos[..., 1], "u1": u[..., 0], "u2": u[..., 1],
                "du11": Du[..., 0, 0], "du12": Du[..., 0, 1], "du21": Du[..., 1, 0], "du22": Du[..., 1, 1]}

    def __call__(self, pos, u, Du):
        env = self._env(pos, u, Du)
        shape = pos.shape[:-1]

        def ev(e):
            return np.broadcast_to(np.asarray(evaluate(e, env), dtype=float), shape)

        p = self.partials
        D1 = np.stack([ev(p["x"]), ev(p["y"])], axis=-1)
        D2 = np.stack([ev(p["u1"]), ev(p["u2"])], axis=-1)
        D3 = np.stack([np.stack([ev(p["du11"]), ev(p["du12"])], -1), np.stack([ev(p["du21"]), ev(p["du22"])], -1)], -2)
        return IntegrandValues(ev(self.expr).copy(), D1, D2, D3)

    def __repr__(self):
        from .expr import to_string

        return f"ExpressionIntegrand({to_string(self.expr)!r})"


@dataclass
class FunctionalSpec:
    """Shape functional int_solid j_S(Y, w, grad w) + int_fluid j_F(x, u, grad u) on the
    current configuration, evaluated by pulling both terms back to the reference."""

    j_S: Integrand
    j_F: Integrand
    name: str = "custom"

    @classmethod
    def energy(cls) -> "FunctionalSpec":
        return cls(EnergyIntegrand(), EnergyIntegrand(), "ENERGY")

    @classmethod
    def from_expressions(cls, j_S: str | None, j_F: str | None, name: str = "custom") -> "FunctionalSpec":
        conv = lambda s: ZeroIntegrand() if s is None or str(s).strip() in ("", "0") else ExpressionIntegrand(s)
        return cls(conv(j_S), conv(j_F), name)

    @classmethod
    def builtin(cls, name: str) -> "FunctionalSpec":
        if name.upper() == "ENERGY":
            return cls.energy()
        raise ValueError(f"unknown built-in functional {name!r}")

    @property
    def is_energy(self) -> bool:
        return isinstance(self.j_S, EnergyIntegrand) and isinstance(self.j_F, EnergyIntegrand)


# ---------------------------------------------------------------------------
# Pointwise field samples
# ---------------------------------------------------------------------------

def _vec(space, coeffs, trace=None):
    if trace is None:
        return split_vector_jet(field_jets(space, coeffs))
    return split_vector_jet(field_jets(space, coeffs, jets=trace.jets, cells=trace.local_cells))


def _scal(space, coeffs, trace=None):
    if trace is None:
        return field_jets(space, coeffs)[..., 0]
    return field_jets(space, coeffs, jets=trace.jets, cells=trace.local_cells)[..., 0]


def _scal_grad(space, coeffs):
    return field_jets(space, coeffs)[..., 1:3]


def eval_functional(spec: FunctionalSpec, disc: Discretization, state: FsiState,
                    ts: TransformState | None = None) -> float:
    """Value of the functional for a (possibly transported) state."""
    ts = state.ts if ts is None else ts
    total = 0.0
    if not spec.j_F.is_zero:
        v, gv = _vec(disc.vf, state.v)
        Ai = inv2(ts.fluid.A)
        jf = spec.j_F(ts.fluid.pos, v, gv @ Ai)
        total += float(np.sum(disc.vf.quad.weights * jf.val * ts.fluid.J))
    if not spec.j_S.is_zero:
        w, gw = _vec(disc.ws, state.w)
        Bi = inv2(ts.solid.A)
        js = spec.j_S(ts.solid.pos, w, gw @ Bi)
        total += float(np.sum(disc.ws.quad.weights * js.val * ts.solid.J))
    return total


# ---------------------------------------------------------------------------
# The coupled residual and its derivatives
# ---------------------------------------------------------------------------

BLOCKS = ("v", "q", "lam", "w", "s", "ell")


@dataclass
class StateVector:
    """Block view of a coupled vector (state, material derivative or adjoint)."""

    v: np.ndarray
    q: np.ndarray
    lam: float
    w: np.ndarray
    s: np.ndarray
    ell: np.ndarray

    def scaled(self, a: float) -> "StateVector":
        return StateVector(a * self.v, a * self.q, a * self.lam, a * self.w, a * self.s, a * self.ell)


@dataclass
class MaterialDerivatives(StateVector):
    """Material derivatives; ``Tdot_val``/``Tdot_grad`` sample Tdot = V + R(trace wdot) on the fluid."""

    Tdot_val: Optional[np.ndarray] = None
    Tdot_grad: Optional[np.ndarray] = None


@dataclass
class AdjointState(StateVector):
    pass


class CoupledSystem:
    """Discrete coupled residual R(t, X) around a reference discretisation."""

    def __init__(self, disc: Discretization, data: ProblemData):
        self.disc = disc
        self.data = data
        d = disc
        self.sizes = [d.vf.n_total, d.qf.n_total, 1, d.ws.n_total, d.ss.n_total, d.lifting.space.n_total]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.n_total = int(self.offsets[-1])
        free = np.zeros(self.n_total, dtype=bool)
        o = self.offsets
        free[o[0] + d.vf.free] = True
        free[o[1]:o[3]] = True
        free[o[3] + d.ws.free] = True
        free[o[4]:o[5]] = True
        free[o[5] + d.lifting.space.free] = True
        self.free = np.flatnonzero(free)
        D_ell, D_w, rows = d.lifting.equations()
        perm = sp.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))),
                             shape=(d.lifting.space.n_total, len(rows)))
        self.ext_ell = sp.csr_matrix(perm @ D_ell)     # rows indexed by lift dof
        self.ext_w = sp.csr_matrix(perm @ D_w)

    # -- packing ---------------------------------------------------------
    def pack(self, x: StateVector) -> np.ndarray:
        return np.concatenate([x.v, x.q, [x.lam], x.w, x.s, x.ell])

    def unpack(self, X: np.ndarray, cls=StateVector, **extra):
        o = self.offsets
        return cls(X[o[0]:o[1]].copy(), X[o[1]:o[2]].copy(), float(X[o[2]]), X[o[3]:o[4]].copy(),
                   X[o[4]:o[5]].copy(), X[o[5]:o[6]].copy(), **extra)

    def state_vector(self, state: FsiState) -> np.ndarray:
        return self.pack(StateVector(state.v, state.q, state.lam, state.w, state.s, state.ell))

    def transform(self, X: StateVector, t: float = 0.0, V: ShapeVelocity | None = None) -> TransformState:
        d = self.disc
        return build_transform(d.lifting, None, d.tr_l, t=t, V=V, ell=X.ell, j_min=-np.inf)

    # -- pointwise ingredients ---------------------------------------------
    def _fluid_fields(self, X: StateVector, ts: TransformState):
        d = self.disc
        _, gv = _vec(d.vf, X.v)
        q = _scal(d.qf, X.q)
        _, gv_e = _vec(d.vf, X.v, d.tr_v)
        q_e = _scal(d.qf, X.q, d.tr_q)
        return gv, q, gv_e, q_e

    # -- residual ----------------------------------------------------------
    def residual(self, X: np.ndarray, t: float = 0.0, V: ShapeVelocity | None = None) -> np.ndarray:
        """Full residual vector (all rows; constrained rows are meaningless)."""
        d, data = self.disc, self.data
        x = self.unpack(X)
        ts = self.transform(x, t, V)
        Avv, Bqv = fluid_operator(d, ts, data.nu)
        fT = data.f.eval(ts.fluid.pos[..., 0], ts.fluid.pos[..., 1]) * ts.fluid.J[..., None]
        from .fem import vector_jet
        Rv = Avv @ x.v + Bqv.T @ x.q - assemble_volume_vector(d.vf, vector_jet(fT, None, fT.shape[:2]))
        Rq = Bqv @ x.v + x.lam * d.gauge
        Rl = np.array([d.gauge @ x.q])
        Aww, Bsw = structure_operator(d, ts, data.mu)
        gY = data.g.eval(ts.solid.pos[..., 0], ts.solid.pos[..., 1]) * ts.solid.J[..., None]
        from .fem import assemble_interface_form
        from .fsi import interface_traction
        tr = interface_traction(d, ts, x.v, x.q, data.nu)
        Rw = (Aww @ x.w + Bsw.T @ x.s - assemble_volume_vector(d.ws, vector_jet(gY, None, gY.shape[:2]))
              - assemble_interface_form(d.tr_w, tr))
        Rs = Bsw @ x.w
        Re = self.ext_ell @ x.ell + self.ext_w @ x.w
        return np.concatenate([Rv, Rq, Rl, Rw, Rs, Re])

    # -- Jacobian in X -----------------------------------------------------
    def jacobian(self, X: np.ndarray, t: float = 0.0, V: ShapeVelocity | None = None) -> sp.csr_matrix:
        d, data = self.disc, self.data
        nu, mu = data.nu, data.mu
        x = self.unpack(X)
        ts = self.transform(x, t, V)
        lf = d.lifting.space
        gv, q, gv_e, q_e = self._fluid_fields(x, ts)
        A = ts.fluid.A
        DJ, DG, DF = variation_tensors(A)
        fT = data.f.eval(ts.fluid.pos[..., 0], ts.fluid.pos[..., 1])
        gradf = data.f.eval_grad(ts.fluid.pos[..., 0], ts.fluid.pos[..., 1])

        Avv, Bqv = fluid_operator(d, ts, nu)
        # d R_v / d ell
        nc, nq = A.shape[:2]
        c = np.zeros((nc, nq, 6, 6))
        grad_part = nu * np.einsum("cqik,cqklmn->cqilmn", gv, DF) - q[..., None, None, None, None] * DG
        for i in range(2):
            for l in range(2):
                for m in range(2):
                    c[:, :, 3 * i + 1 + l, 3 * m + 1:3 * m + 3] = grad_part[:, :, i, l, m, :]
        for i in range(2):
            for m in range(2):
                c[:, :, 3 * i, 3 * m + 1:3 * m + 3] = -DJ[:, :, m, :] * fT[..., i, None]
                c[:, :, 3 * i, 3 * m] = -ts.fluid.J * gradf[..., i, m]
        Avl = assemble_volume_form(d.vf, lf, c)
        # d R_q / d ell
        cq = np.zeros((nc, nq, 3, 6))
        t_q = -np.einsum("cqilmn,cqil->cqmn", DG, gv)
        for m in range(2):
            cq[:, :, 0, 3 * m + 1:3 * m + 3] = t_q[:, :, m, :]
        Aql = assemble_volume_form(d.qf, lf, cq)
        # interface rows of R_w
        n = d.tr_v.normals
        ne, ng = q_e.shape
        Fe, Ge = ts.edge.F, ts.edge.G
        Fn = np.einsum("egkl,el->egk", Fe, n)
        Gn = np.einsum("egil,el->egi", Ge, n)
        cwv = np.zeros((ne, ng, 6, 6))
        cwq = np.zeros((ne, ng, 6, 3))
        for i in range(2):
            cwv[:, :, 3 * i, 3 * i + 1:3 * i + 3] = -nu * Fn
            cwq[:, :, 3 * i, 0] = Gn[..., i]
        Awv = assemble_edge_form(d.tr_w, d.tr_v, cwv)
        Awq = assemble_edge_form(d.tr_w, d.tr_q, cwq)
        _, DGe, DFe = variation_tensors(ts.edge.A)
        sig = nu * np.einsum("egik,egklmn->egilmn", gv_e, DFe) - q_e[..., None, None, None, None] * DGe
        sn = np.einsum("egilmn,el->egimn", sig, n)
        cwl = np.zeros((ne, ng, 6, 6))
        for i in range(2):
            for m in range(2):
                cwl[:, :, 3 * i, 3 * m + 1:3 * m + 3] = -sn[:, :, i, m, :]
        Awl = assemble_edge_form(d.tr_w, d.tr_l, cwl)
        Aww, Bsw = structure_operator(d, ts, mu)
        g = sp.csr_matrix(d.gauge.reshape(-1, 1))
        Z = None
        K = sp.bmat([
            [Avv, Bqv.T, Z, Z, Z, Avl],
            [Bqv, Z, g, Z, Z, Aql],
            [Z, g.T, sp.csr_matrix((1, 1)), Z, Z, Z],
            [Awv, Awq, Z, Aww, Bsw.T, Awl],
            [Z, Z, Z, Bsw, Z, Z],
            [Z, Z, Z, self.ext_w, Z, self.ext_ell],
        ], format="csr")
        return K

    # -- explicit t-derivative of the residual ------------------------------
    def dt_residual(self, X: np.ndarray, V: ShapeVelocity, t: float = 0.0) -> np.ndarray:
        """D_t R(t, X) as an assembled vector."""
        from .fem import assemble_interface_form, vector_jet

        d, data = self.disc, self.data
        x = self.unpack(X)
        ts = self.transform(x, t, V)
        c_v, c_q, c_w, c_s, tr = self._dt_coefficients(x, ts, V)
        Rv = assemble_volume_vector(d.vf, c_v)
        Rq = assemble_volume_vector(d.qf, c_q)
        Rw = assemble_volume_vector(d.ws, c_w) - assemble_interface_form(d.tr_w, tr)
        Rs = assemble_volume_vector(d.ss, c_s)
        z = np.zeros
        return np.concatenate([Rv, Rq, z(1), Rw, Rs, z(d.lifting.space.n_total)])

    def _dt_coefficients(self, x: StateVector, ts: TransformState, V: ShapeVelocity):
        """Jet-dual coefficients of the t-derivative of every residual row."""
        d, data = self.disc, self.data
        nu, mu = data.nu, data.mu
        gv, q, gv_e, q_e = self._fluid_fields(x, ts)
        A, J = ts.fluid.A, ts.fluid.J
        KV = V.fluid.grad
        dFv, dGv, dJv = dF(A, KV), dG(A, KV), dJ(A, KV)
        fT = data.f.eval(ts.fluid.pos[..., 0], ts.fluid.pos[..., 1])
        gradf = data.f.eval_grad(ts.fluid.pos[..., 0], ts.fluid.pos[..., 1])
        from .fem import vector_jet

        val = -dJv[..., None] * fT - J[..., None] * np.einsum("cqim,cqm->cqi", gradf, V.fluid.val)
        grd = nu * gv @ dFv - q[..., None, None] * dGv
        c_v = vector_jet(val, grd, A.shape[:2])
        c_q = np.zeros(A.shape[:2] + (3,))
        c_q[..., 0] = -np.sum(dGv * gv, axis=(-2, -1))
        # structure
        _, gw = _vec(d.ws, x.w)
        s = _scal(d.ss, x.s)
        B, JB = ts.solid.A, ts.solid.J
        KS = V.solid.grad
        dFb, dGb, dJb = dF(B, KS), dG(B, KS), dJ(B, KS)
        gY = data.g.eval(ts.solid.pos[..., 0], ts.solid.pos[..., 1])
        gradg = data.g.eval_grad(ts.solid.pos[..., 0], ts.solid.pos[..., 1])
        val_w = -dJb[..., None] * gY - JB[..., None] * np.einsum("cqim,cqm->cqi", gradg, V.solid.val)
        grd_w = mu * gw @ dFb - s[..., None, None] * dGb
        c_w = vector_jet(val_w, grd_w, B.shape[:2])
        c_s = np.zeros(B.shape[:2] + (3,))
        c_s[..., 0] = -np.sum(dGb * gw, axis=(-2, -1))
        Ae = ts.edge.A
        KE = V.edge.grad
        sig = nu * gv_e @ dF(Ae, KE) - q_e[..., None, None] * dG(Ae, KE)
        tr = np.einsum("egij,ej->egi", sig, d.tr_v.normals)
        return c_v, c_q, c_w, c_s, tr

    # -- functional partials -------------------------------------------------
    def functional_dX(self, spec: FunctionalSpec, X: np.ndarray, t: float = 0.0,
                      V: ShapeVelocity | None = None) -> np.ndarray:
        """D_X j(t, X) as a vector over all unknowns."""
        from .fem import vector_jet

        d = self.disc
        x = self.unpack(X)
        ts = self.transform(x, t, V)
        out = np.zeros(self.n_total)
        o = self.offsets
        if not spec.j_F.is_zero:
            v, gv = _vec(d.vf, x.v)
            A, J = ts.fluid.A, ts.fluid.J
            Ai = inv2(A)
            N = gv @ Ai
            jf = spec.j_F(ts.fluid.pos, v, N)
            AiT = np.swapaxes(Ai, -1, -2)
            out[o[0]:o[1]] = assemble_volume_vector(d.vf, vector_jet(J[..., None] * jf.D2,
                                                                     J[..., None, None] * (jf.D3 @ AiT), A.shape[:2]))
            gl = -J[..., None, None] * (np.swapaxes(N, -1, -2) @ jf.D3 @ AiT) + jf.val[..., None, None] * cof2(A)
            out[o[5]:o[6]] = assemble_volume_vector(d.lifting.space,
                                                    vector_jet(J[..., None] * jf.D1, gl, A.shape[:2]))
        if not spec.j_S.is_zero:
            w, gw = _vec(d.ws, x.w)
            B, JB = ts.solid.A, ts.solid.J
            Bi = inv2(B)
            js = spec.j_S(ts.solid.pos, w, gw @ Bi)
            out[o[3]:o[4]] = assemble_volume_vector(
                d.ws, vector_jet(JB[..., None] * js.D2, JB[..., None, None] * (js.D3 @ np.swapaxes(Bi, -1, -2)),
                                 B.shape[:2]))
        return out

    def functional_dt(self, spec: FunctionalSpec, X: np.ndarray, V: ShapeVelocity, t: float = 0.0) -> float:
        """Explicit t-derivative of j(t, X) at fixed X (geometric terms)."""
        d = self.disc
        x = self.unpack(X)
        ts = self.transform(x, t, V)
        total = 0.0
        if not spec.j_F.is_zero:
            v, gv = _vec(d.vf, x.v)
            A, J = ts.fluid.A, ts.fluid.J
            Ai = inv2(A)
            N = gv @ Ai
            jf = spec.j_F(ts.fluid.pos, v, N)
            dN = -N @ V.fluid.grad @ Ai
            integrand = (J * np.einsum("cqi,cqi->cq", jf.D1, V.fluid.val) + J * np.sum(jf.D3 * dN, axis=(-2, -1))
                         + jf.val * dJ(A, V.fluid.grad))
            total += float(np.sum(d.vf.quad.weights * integrand))
        if not spec.j_S.is_zero:
            w, gw = _vec(d.ws, x.w)
            B, JB = ts.solid.A, ts.solid.J
            Bi = inv2(B)
            M = gw @ Bi
            js = spec.j_S(ts.solid.pos, w, M)
            dM = -M @ V.solid.grad @ Bi
            integrand = (JB * np.einsum("cqi,cqi->cq", js.D1, V.solid.val) + JB * np.sum(js.D3 * dM, axis=(-2, -1))
                         + js.val * dJ(B, V.solid.grad))
            total += float(np.sum(d.ws.quad.weights * integrand))
        return total


# ---------------------------------------------------------------------------
# Linearised solves
# ---------------------------------------------------------------------------

class Linearization:
    """Factorised D_X R at a converged state (t = 0), shared by all directions."""

    def __init__(self, disc: Discretization, data: ProblemData, state: FsiState):
        self.system = CoupledSystem(disc, data)
        self.state = state
        self.X0 = self.system.state_vector(state)
        K = self.system.jacobian(self.X0)
        fr = self.system.free
        self.matrix = K[fr][:, fr].tocsc()
        self._lu: Factorization | None = None
        self._lu_error: SolverError | None = None

    @property
    def lu(self) -> Factorization:
        if self._lu is None:
            self._lu = Factorization(self.matrix)
        return self._lu

    def expand(self, xf: np.ndarray) -> np.ndarray:
        X = np.zeros(self.system.n_total)
        X[self.system.free] = xf
        return X

    def solve(self, rhs: np.ndarray, trans: bool = False) -> np.ndarray:
        xf = self.lu.solve(rhs[self.system.free], trans=trans)
        if not np.all(np.isfinite(xf)):
            raise SolverError("linearised system produced non-finite values", code="SINGULAR_SYSTEM", pivot=None)
        return self.expand(xf)


def solve_material_derivatives(lin: Linearization, V: ShapeVelocity) -> MaterialDerivatives:
    """Solve D_X R . Xdot = -D_t R for the material derivatives in direction V."""
    sysm = lin.system
    rhs = -sysm.dt_residual(lin.X0, V)
    Xd = lin.solve(rhs)
    md = sysm.unpack(Xd, MaterialDerivatives)
    d = sysm.disc
    lval, lgrad = _vec(d.lifting.space, md.ell)
    md.Tdot_val = V.fluid.val + lval
    md.Tdot_grad = V.fluid.grad + lgrad
    return md


def shape_derivative_direct(spec: FunctionalSpec, lin: Linearization, md: MaterialDerivatives,
                            V: ShapeVelocity) -> float:
    """Direct derivative: the eight pointwise integrals in (Tdot, vdot, wdot, V).

    fluid:  D1 j_F . Tdot J + D2 j_F . vdot J
            + D3 j_F : (grad vdot A^-1 - grad v A^-1 grad Tdot A^-1) J + j_F tr(cof(A)^T grad Tdot)
    solid:  D1 j_S . V + D2 j_S . wdot + D3 j_S : (grad wdot - grad w grad V) + j_S div V
    """
    d = lin.system.disc
    st = lin.state
    ts = st.ts
    total = 0.0
    if not spec.j_F.is_zero:
        v, gv = _vec(d.vf, st.v)
        vd, gvd = _vec(d.vf, md.v)
        A, J = ts.fluid.A, ts.fluid.J
        Ai = inv2(A)
        N = gv @ Ai
        jf = spec.j_F(ts.fluid.pos, v, N)
        t1 = np.einsum("cqi,cqi->cq", jf.D1, md.Tdot_val) * J
        t2 = np.einsum("cqi,cqi->cq", jf.D2, vd) * J
        t3 = np.sum(jf.D3 * (gvd @ Ai - N @ md.Tdot_grad @ Ai), axis=(-2, -1)) * J
        t4 = jf.val * np.sum(cof2(A) * md.Tdot_grad, axis=(-2, -1))
        total += float(np.sum(d.vf.quad.weights * (t1 + t2 + t3 + t4)))
    if not spec.j_S.is_zero:
        w, gw = _vec(d.ws, st.w)
        wd, gwd = _vec(d.ws, md.w)
        js = spec.j_S(ts.solid.pos, w, gw)
        t5 = np.einsum("cqi,cqi->cq", js.D1, V.solid.val)
        t6 = np.einsum("cqi,cqi->cq", js.D2, wd)
        t7 = np.sum(js.D3 * (gwd - gw @ V.solid.grad), axis=(-2, -1))
        t8 = js.val * (V.solid.grad[..., 0, 0] + V.solid.grad[..., 1, 1])
        total += float(np.sum(d.ws.quad.weights * (t5 + t6 + t7 + t8)))
    return total


def energy_shape_derivative(lin: Linearization, md: MaterialDerivatives, V: ShapeVelocity) -> float:
    """Direct derivative of the energy functional, written out explicitly:

    int_fluid eps_A(v) : (grad vdot A^-1 - grad v A^-1 grad Tdot A^-1) J + 1/2 |eps_A(v)|^2 tr(cof(A)^T grad Tdot)
    + int_solid eps(w) : (grad wdot - grad w grad V) + 1/2 |eps(w)|^2 div V,
    with eps_A(v) = sym(grad v A^-1)."""
    d = lin.system.disc
    st = lin.state
    ts = st.ts
    _, gv = _vec(d.vf, st.v)
    _, gvd = _vec(d.vf, md.v)
    A, J = ts.fluid.A, ts.fluid.J
    Ai = inv2(A)
    N = gv @ Ai
    eA = sym(N)
    fl = (np.sum(eA * (gvd @ Ai - N @ md.Tdot_grad @ Ai), axis=(-2, -1)) * J
          + 0.5 * np.sum(eA * eA, axis=(-2, -1)) * np.sum(cof2(A) * md.Tdot_grad, axis=(-2, -1)))
    _, gw = _vec(d.ws, st.w)
    _, gwd = _vec(d.ws, md.w)
    e = sym(gw)
    so = (np.sum(e * (gwd - gw @ V.solid.grad), axis=(-2, -1))
          + 0.5 * np.sum(e * e, axis=(-2, -1)) * (V.solid.grad[..., 0, 0] + V.solid.grad[..., 1, 1]))
    return float(np.sum(d.vf.quad.weights * fl) + np.sum(d.ws.quad.weights * so))


def solve_adjoint(spec: FunctionalSpec, lin: Linearization) -> AdjointState:
    """Solve D_X R^T . Y = -D_X j.  A singular operator is reported as ADJOINT_UNAVAILABLE."""
    rhs = -lin.system.functional_dX(spec, lin.X0)
    if not np.any(rhs[lin.system.free]):
        return lin.system.unpack(np.zeros(lin.system.n_total), AdjointState)
    try:
        Y = lin.solve(rhs, trans=True)
    except SolverError as exc:
        raise SolverError(f"adjoint system could not be solved: {exc.args[0]}", code="ADJOINT_UNAVAILABLE",
                          **exc.details) from None
    return lin.system.unpack(Y, AdjointState)


def adjoint_correction(lin: Linearization, adj: AdjointState, V: ShapeVelocity) -> float:
    """<Y, D_t R> evaluated pointwise from the adjoint fields: t-variations of the
    fluid and structure forms (via dJ, dG, dF of grad V and the load derivatives)
    tested with the adjoint fields, plus the GAMMA0 traction term."""
    sysm = lin.system
    d = sysm.disc
    x = sysm.unpack(lin.X0)
    c_v, c_q, c_w, c_s, tr = sysm._dt_coefficients(x, lin.state.ts, V)
    jv = field_jets(d.vf, adj.v)
    jq = field_jets(d.qf, adj.q)
    jw = field_jets(d.ws, adj.w)
    js = field_jets(d.ss, adj.s)
    vol = (np.sum(d.vf.quad.weights * np.sum(c_v * jv, axis=-1))
           + np.sum(d.qf.quad.weights * np.sum(c_q * jq, axis=-1))
           + np.sum(d.ws.quad.weights * np.sum(c_w * jw, axis=-1))
           + np.sum(d.ss.quad.weights * np.sum(c_s * js, axis=-1)))
    aw, _ = _vec(d.ws, adj.w, d.tr_w)
    edge = -np.sum(d.tr_w.weights * np.einsum("egi,egi->eg", aw, tr))
    return float(vol + edge)


def shape_derivative_adjoint(spec: FunctionalSpec, lin: Linearization, adj: AdjointState,
                             V: ShapeVelocity) -> float:
    """Adjoint derivative: explicit geometric terms of the functional plus the
    adjoint-weighted t-variation of the state equations."""
    return lin.system.functional_dt(spec, lin.X0, V) + adjoint_correction(lin, adj, V)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ShapeGradientReport:
    """One direction, one functional: derivative values and their cross-checks."""

    direction: str
    functional: str
    value: float = float("nan")
    derivative_direct: float = float("nan")
    derivative_adjoint: float = float("nan")
    fd_steps: list = field(default_factory=list)
    fd_values: list = field(default_factory=list)
    fd_errors: list = field(default_factory=list)
    fd_reference: float = float("nan")
    observed_order: float = float("nan")
    direct_adjoint_gap: float = float("nan")
    status: str = "OK"
    message: str = ""

    def as_row(self) -> dict:
        return {
            "direction": self.direction, "functional": self.functional, "status": self.status,
            "value": self.value, "derivative_direct": self.derivative_direct,
            "derivative_adjoint": self.derivative_adjoint, "direct_adjoint_gap": self.direct_adjoint_gap,
            "fd_reference": self.fd_reference, "observed_order": self.observed_order,
        }
