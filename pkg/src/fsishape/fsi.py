"""Fluid and structure sub-solvers and their Picard coupling.

Fluid (transported Stokes on the reference fluid region):

    nu (grad v) F : grad 𝔳 - q G : grad 𝔳 = J f(T) . 𝔳,   -𝔮 G : grad v = 0,   int q = 0

Structure (incompressible elasticity with a stress condition on GAMMA0):

    mu (grad w) F_B : grad 𝔴 - s G_B : grad 𝔴 = J_B g(Phi) . 𝔴 + int_GAMMA0 𝔴 . traction,
    -𝔰 G_B : grad w = 0,

where F_B, G_B, J_B come from B = grad Phi_t (identity on the untransported
problem) and traction = (nu (grad v) F(T) - q G(T)) n0.  The fixed-point map
takes a displacement b to the displacement produced by the traction of the
fluid solved in the configuration T(b).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import SolverError
from .expr import VectorField
from .fem import (EdgeTrace, FunctionSpace, SparseSystem, assemble_interface_form, assemble_volume_form,
                  assemble_volume_vector, compute_norm, field_jets, mean_weights, solve, spaces_for,
                  split_vector_jet, stiffness_coef, vector_jet)
from .kinematics import Lifting, ShapeVelocity, TransformState, build_transform
from .mesh import Mesh


@dataclass(frozen=True)
class ProblemData:
    """Loads and material constants: fluid force f, structure force g, viscosity nu, shear modulus mu."""

    f: VectorField
    g: VectorField
    nu: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if not (self.nu > 0 and self.mu > 0):
            raise ValueError(f"nu and mu must be positive (got nu={self.nu}, mu={self.mu})")

    @classmethod
    def parse(cls, f, g, nu: float = 1.0, mu: float = 1.0) -> "ProblemData":
        return cls(VectorField.parse(f), VectorField.parse(g), float(nu), float(mu))

    @classmethod
    def zero(cls, nu: float = 1.0, mu: float = 1.0) -> "ProblemData":
        return cls(VectorField.zero(), VectorField.zero(), nu, mu)

    def scaled(self, eps: float) -> "ProblemData":
        return replace(self, f=self.f.scaled(eps), g=self.g.scaled(eps))


@dataclass(frozen=True)
class SolverSettings:
    """Fixed-point controls: stop when ||b_{k+1} - b_k||_H1 <= tol_abs + tol_rel ||b_k||_H1."""

    tol_abs: float = 1e-11
    tol_rel: float = 1e-10
    max_iter: int = 100
    theta: float = 1.0
    j_min: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.theta <= 1.0):
            raise ValueError(f"damping theta must lie in (0, 1], got {self.theta}")
        if not (self.tol_abs > 0 and self.tol_rel > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


class Discretization:
    """Spaces, interface traces, lifting operator and pressure gauge for one mesh.

    ``lifting`` and ``gauge`` may be borrowed from a reference mesh with the
    same connectivity: the discrete problem on a moved mesh is then exactly the
    reference problem transported by the piecewise-affine node motion."""

    def __init__(self, mesh: Mesh, lifting: Lifting | None = None, gauge: np.ndarray | None = None,
                 lifting_method: str = "p2"):
        self.mesh = mesh
        self.vf, self.qf, self.ws, self.ss = spaces_for(mesh)
        if lifting is None:
            lifting = Lifting(mesh, lifting_method)
        elif lifting.mesh is not mesh:
            lifting = lifting.transplant(mesh)
        self.lifting = lifting
        self.tr_v = EdgeTrace(self.vf)
        self.tr_q = EdgeTrace(self.qf)
        self.tr_w = EdgeTrace(self.ws)
        self.tr_l = EdgeTrace(lifting.space)
        self.gauge = mean_weights(self.qf) if gauge is None else np.asarray(gauge, dtype=float)

    def transform(self, w: np.ndarray | None, t: float = 0.0, V: ShapeVelocity | None = None,
                  j_min: float = 0.0) -> TransformState:
        return build_transform(self.lifting, w, self.tr_l, t=t, V=V, j_min=j_min)

    def shape_velocity(self, V: VectorField, interpolated: bool = False) -> ShapeVelocity:
        make = ShapeVelocity.interpolated if interpolated else ShapeVelocity.analytic
        return make(V, self.vf, self.ws, self.tr_l)


@dataclass
class FsiState:
    """Converged coupled state on the reference configuration.

    ``lam`` is the multiplier of the pressure gauge; ``ell`` the lifted
    displacement R(trace w); ``ts`` the transformation the fluid was solved in."""

    v: np.ndarray
    q: np.ndarray
    lam: float
    w: np.ndarray
    s: np.ndarray
    ell: np.ndarray
    ts: TransformState
    t: float = 0.0


@dataclass
class IterationRecord:
    iter: int
    increment_norm: float
    rate: float
    J_min: float


@dataclass
class FixedPointResult:
    state: FsiState
    trace: list[IterationRecord] = field(default_factory=list)
    self_consistency: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.trace)

    @property
    def final_rate(self) -> float:
        rates = [r.rate for r in self.trace if math.isfinite(r.rate)]
        return rates[-1] if rates else float("nan")


# ---------------------------------------------------------------------------
# Fluid
# ---------------------------------------------------------------------------

def _force_samples(field: VectorField, pos: np.ndarray) -> np.ndarray:
    return field.eval(pos[..., 0], pos[..., 1])


def divergence_coef(G: np.ndarray, scale: float = -1.0) -> np.ndarray:
    """Coefficient of (scalar test) x (vector trial): scale * 𝔮 G : grad v, shape (nc, nq, 3, 6)."""
    nc, nq = G.shape[:2]
    c = np.zeros((nc, nq, 3, 6))
    for i in range(2):
        c[:, :, 0, 3 * i + 1:3 * i + 3] = scale * G[:, :, i, :]
    return c


def fluid_operator(disc: Discretization, ts: TransformState, nu: float):
    """(A_vv, B_qv) on full dof sets: A_vv from nu (grad v) F : grad 𝔳, B_qv from -𝔮 G : grad v."""
    A = nu * assemble_volume_form(disc.vf, disc.vf, stiffness_coef(disc.vf, ts.fluid.F))
    B = assemble_volume_form(disc.qf, disc.vf, divergence_coef(ts.fluid.G))
    return A, B


def fluid_load(disc: Discretization, ts: TransformState, f: VectorField) -> np.ndarray:
    fv = ts.fluid.J[..., None] * _force_samples(f, ts.fluid.pos)
    return assemble_volume_vector(disc.vf, vector_jet(fv, None, fv.shape[:2]))


def solve_perturbed_stokes(disc: Discretization, ts: TransformState, data: ProblemData,
                           return_multiplier: bool = False):
    """Velocity and zero-mean pressure of the fluid transported by ``ts``."""
    A, B = fluid_operator(disc, ts, data.nu)
    b = fluid_load(disc, ts, data.f)
    fr = disc.vf.free
    nv, nq = len(fr), disc.qf.n_total
    K = sp.bmat([[A[fr][:, fr], B[:, fr].T], [B[:, fr], None]], format="csr")
    rhs = np.concatenate([b[fr], np.zeros(nq)])
    gauge = np.concatenate([np.zeros(nv), disc.gauge])
    x, lam = _solve_with_multiplier(SparseSystem(K, rhs, gauge))
    v = np.zeros(disc.vf.n_total)
    v[fr] = x[:nv]
    q = x[nv:]
    return (v, q, lam) if return_multiplier else (v, q)


def _solve_with_multiplier(system: SparseSystem):
    from .fem import Factorization

    K, b = system.augmented()
    x = Factorization(K).solve(b)
    if not np.all(np.isfinite(x)):
        raise SolverError("solution contains non-finite values", code="SINGULAR_SYSTEM", pivot=None)
    n = system.matrix.shape[0]
    return x[:n], (float(x[n]) if system.gauge is not None else 0.0)


def interface_traction(disc: Discretization, ts: TransformState, v: np.ndarray, q: np.ndarray,
                       nu: float) -> np.ndarray:
    """(nu (grad v) F - q G) n0 at GAMMA0 quadrature points (fluid side); shape (ne, ng, 2)."""
    tv = disc.tr_v
    _, gv = split_vector_jet(field_jets(disc.vf, v, jets=tv.jets, cells=tv.local_cells))
    tq = disc.tr_q
    qv = field_jets(disc.qf, q, jets=tq.jets, cells=tq.local_cells)[..., 0]
    sigma = nu * gv @ ts.edge.F - qv[..., None, None] * ts.edge.G
    return np.einsum("egij,ej->egi", sigma, tv.normals)


# ---------------------------------------------------------------------------
# Structure
# ---------------------------------------------------------------------------

def structure_operator(disc: Discretization, ts: TransformState | None, mu: float):
    """(A_ww, B_sw): mu (grad w) F_B : grad 𝔴 and -𝔰 G_B : grad w (identity B if ts is None)."""
    if ts is None:
        Fb = Gb = None
        A = mu * assemble_volume_form(disc.ws, disc.ws, stiffness_coef(disc.ws))
        nc, nq = disc.ws.quad.points.shape[:2]
        Gb = np.broadcast_to(np.eye(2), (nc, nq, 2, 2))
    else:
        Fb, Gb = ts.solid.F, ts.solid.G
        A = mu * assemble_volume_form(disc.ws, disc.ws, stiffness_coef(disc.ws, Fb))
    B = assemble_volume_form(disc.ss, disc.ws, divergence_coef(Gb))
    return A, B


def structure_load(disc: Discretization, ts: TransformState | None, g: VectorField) -> np.ndarray:
    if ts is None:
        pos = disc.ws.quad.points
        gv = _force_samples(g, pos)
    else:
        gv = ts.solid.J[..., None] * _force_samples(g, ts.solid.pos)
    return assemble_volume_vector(disc.ws, vector_jet(gv, None, gv.shape[:2]))


def solve_structure_mixed(disc: Discretization, traction: np.ndarray, data: ProblemData,
                          ts: TransformState | None = None):
    """Displacement and multiplier with (mu grad w - s I) n0 = traction on GAMMA0."""
    A, B = structure_operator(disc, ts, data.mu)
    b = structure_load(disc, ts, data.g) + assemble_interface_form(disc.tr_w, traction)
    fr = disc.ws.free
    nw = len(fr)
    K = sp.bmat([[A[fr][:, fr], B[:, fr].T], [B[:, fr], None]], format="csr")
    rhs = np.concatenate([b[fr], np.zeros(disc.ss.n_total)])
    x = solve(SparseSystem(K, rhs))
    w = np.zeros(disc.ws.n_total)
    w[fr] = x[:nw]
    return w, x[nw:]


# ---------------------------------------------------------------------------
# Coupling
# ---------------------------------------------------------------------------

def apply_map(disc: Discretization, b: np.ndarray, data: ProblemData, t: float = 0.0,
              V: ShapeVelocity | None = None, j_min: float = 0.0):
    """One application of the fixed-point map: b -> (fluid, structure) solved in T(b)."""
    ts = disc.transform(b, t=t, V=V, j_min=j_min)
    v, q, lam = solve_perturbed_stokes(disc, ts, data, return_multiplier=True)
    tr = interface_traction(disc, ts, v, q, data.nu)
    w, s = solve_structure_mixed(disc, tr, data, ts)
    return ts, v, q, lam, w, s


def fsi_fixed_point(disc: Discretization, data: ProblemData, settings: SolverSettings = SolverSettings(),
                    t: float = 0.0, V: ShapeVelocity | None = None) -> FixedPointResult:
    """Picard iteration b_{k+1} = (1 - theta) b_k + theta S(b_k) from b_0 = 0.

    With ``t`` and ``V`` the problem transported by Phi_t = id + tV is solved
    on the reference mesh.  Raises MAX_ITER_EXCEEDED (details: history) or
    NONINVERTIBLE_TRANSFORM (details: history, point)."""
    ws = disc.ws
    b = np.zeros(ws.n_total)
    trace: list[IterationRecord] = []
    prev_inc = None
    for k in range(1, settings.max_iter + 1):
        try:
            ts, v, q, lam, w, s = apply_map(disc, b, data, t, V, settings.j_min)
        except SolverError as exc:
            exc.details.setdefault("history", list(trace))
            raise
        b_new = (1.0 - settings.theta) * b + settings.theta * w
        inc = compute_norm(ws, b_new - b, "H1")
        nb = compute_norm(ws, b, "H1")
        rate = inc / prev_inc if prev_inc else float("nan")
        trace.append(IterationRecord(k, inc, rate, ts.j_min))
        if not math.isfinite(inc):
            raise SolverError("fixed-point iterate became non-finite", code="MAX_ITER_EXCEEDED", history=trace)
        if inc <= settings.tol_abs + settings.tol_rel * nb:
            state = FsiState(v=v, q=q, lam=lam, w=w, s=s, ell=disc.lifting.lift(w), ts=ts, t=t)
            return FixedPointResult(state, trace, self_consistency=compute_norm(ws, w - b, "H1"))
        b = b_new
        prev_inc = inc
    last = trace[-1].increment_norm if trace else float("nan")
    raise SolverError(f"fixed point did not converge in {settings.max_iter} iterations "
                      f"(last increment {last:.3e})", code="MAX_ITER_EXCEEDED", history=trace,
                      last_residual=last)


def state_norm(disc: Discretization, state: FsiState) -> float:
    """||v||_H1 + ||q||_L2 + ||w||_H1 + ||s||_L2."""
    return (compute_norm(disc.vf, state.v, "H1") + compute_norm(disc.qf, state.q, "L2")
            + compute_norm(disc.ws, state.w, "H1") + compute_norm(disc.ss, state.s, "L2"))
