"""The discrete transformation T(w) = id + R(trace w) and its coefficient fields.

``R`` extends the interface trace of the solid displacement harmonically
(componentwise) into the fluid, with zero data on the box boundary.  From
A = grad T we sample, at every fluid quadrature point and at the fluid side
of every interface quadrature point,

    J = det A,   G = cof A = J A^{-T},   F = A^{-1} cof A,

together with their first variations in A (used both for w-variations, with
the increment K = grad R(k), and for t-variations, with K = grad V).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import SolverError
from .expr import VectorField
from .fem import (EdgeTrace, Factorization, FunctionSpace, P2VEC, assemble_volume_form, assemble_volume_vector,
                  field_jets, refined_p1_laplacian, split_vector_jet, stiffness_coef, mass_coef)
from .mesh import FLUID, GAMMA0, GAMMA_OMEGA, OUTER, SOLID, Mesh

I2 = np.eye(2)


# ---------------------------------------------------------------------------
# 2x2 matrix calculus, vectorised over leading axes
# ---------------------------------------------------------------------------

def det2(A: np.ndarray) -> np.ndarray:
    return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]


def cof2(A: np.ndarray) -> np.ndarray:
    """Cofactor matrix: cof A = det(A) A^{-T} (defined for every A)."""
    C = np.empty_like(A)
    C[..., 0, 0] = A[..., 1, 1]
    C[..., 0, 1] = -A[..., 1, 0]
    C[..., 1, 0] = -A[..., 0, 1]
    C[..., 1, 1] = A[..., 0, 0]
    return C


def inv2(A: np.ndarray) -> np.ndarray:
    return np.swapaxes(cof2(A), -1, -2) / det2(A)[..., None, None]


def tr(A: np.ndarray) -> np.ndarray:
    return A[..., 0, 0] + A[..., 1, 1]


def T_(A: np.ndarray) -> np.ndarray:
    return np.swapaxes(A, -1, -2)


def sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + T_(A))


def J_of(A):
    return det2(A)


def G_of(A):
    return cof2(A)


def F_of(A):
    return inv2(A) @ cof2(A)


def diff_det(A, B):
    """d/ds det(A + sB) at s = 0: tr(cof(A)^T B)."""
    return np.sum(cof2(A) * B, axis=(-2, -1))


def diff_inv(A, B):
    """d/ds (A + sB)^{-1} at s = 0: -A^{-1} B A^{-1}."""
    Ai = inv2(A)
    return -Ai @ B @ Ai


def diff_cof(A, B):
    """d/ds cof(A + sB) at s = 0: (tr(cof(A)^T B) I - cof(A) B^T) A^{-T}."""
    C = cof2(A)
    return (diff_det(A, B)[..., None, None] * I2 - C @ T_(B)) @ T_(inv2(A))


def dJ(A, K):
    """Variation of J = det A in direction K: tr(cof(A)^T K)."""
    return diff_det(A, K)


def dG(A, K):
    """Variation of G = cof A in direction K: [tr(A^{-1}K) I - A^{-T} K^T] cof(A)."""
    Ai = inv2(A)
    return (tr(Ai @ K)[..., None, None] * I2 - T_(Ai) @ T_(K)) @ cof2(A)


def dF(A, K):
    """Variation of F = A^{-1} cof A in direction K:
    cof(A)^T [tr(A^{-1}K) I - 2 sym(K A^{-1})] A^{-T}."""
    Ai = inv2(A)
    inner = tr(Ai @ K)[..., None, None] * I2 - 2.0 * sym(K @ Ai)
    return T_(cof2(A)) @ inner @ T_(Ai)


def _unit(m, n):
    E = np.zeros((2, 2))
    E[m, n] = 1.0
    return E


def variation_tensors(A: np.ndarray):
    """Derivative tensors with dJ[K] = sum DJ[m,n] K[m,n], dG[K]_{ij} = sum DG[i,j,m,n] K[m,n], etc."""
    shape = A.shape[:-2]
    DJ = np.empty(shape + (2, 2))
    DG = np.empty(shape + (2, 2, 2, 2))
    DF = np.empty(shape + (2, 2, 2, 2))
    for m in range(2):
        for n in range(2):
            E = _unit(m, n)
            DJ[..., m, n] = dJ(A, E)
            DG[..., :, :, m, n] = dG(A, E)
            DF[..., :, :, m, n] = dF(A, E)
    return DJ, DG, DF


# ---------------------------------------------------------------------------
# Lifting
# ---------------------------------------------------------------------------

class Lifting:
    """Componentwise discrete harmonic extension of the interface trace.

    ``method="p2"`` uses the quadratic Laplacian of the velocity space (the
    default: second-order accurate gradients); ``method="p1_refined"`` uses the
    linear Laplacian on the 4-to-1 refined triangles, which obeys a discrete
    maximum principle whenever its matrix is an M-matrix.

    The operator depends only on the reference mesh; :meth:`transplant`
    re-attaches it to another mesh with the same connectivity (a deformed copy),
    so that transported problems reuse the reference extension.
    """

    def __init__(self, mesh: Mesh, method: str = "p2", _operator: Optional["Lifting"] = None):
        self.mesh = mesh
        self.method = method
        self.space = FunctionSpace(mesh, FLUID, P2VEC, (OUTER,))
        self.solid_space = FunctionSpace(mesh, SOLID, P2VEC, (GAMMA_OMEGA,))
        if _operator is not None:
            for name in ("K", "gamma_fluid", "gamma_solid", "interior", "lu", "method"):
                setattr(self, name, getattr(_operator, name))
            return
        if method == "p2":
            K = assemble_volume_form(self.space, self.space, stiffness_coef(self.space))
        elif method == "p1_refined":
            K = sp.kron(refined_p1_laplacian(self.space), sp.eye(2), format="csr")
        else:
            raise ValueError(f"unknown lifting method {method!r}")
        self.K = sp.csr_matrix(K)
        g_nodes = mesh.boundary_p2_nodes([GAMMA0])
        g_fluid = self.space.dofs_of_nodes(g_nodes)
        g_solid = self.solid_space.dofs_of_nodes(g_nodes)
        keep = ~self.space.constrained[g_fluid]
        self.gamma_fluid = g_fluid[keep]
        self.gamma_solid = g_solid[keep]
        interior = np.ones(self.space.n_total, dtype=bool)
        interior[self.space.constrained] = False
        interior[self.gamma_fluid] = False
        self.interior = np.flatnonzero(interior)
        self.lu = Factorization(self.K[self.interior][:, self.interior])

    def transplant(self, mesh: Mesh) -> "Lifting":
        if mesh.triangles.shape != self.mesh.triangles.shape or not np.array_equal(mesh.triangles, self.mesh.triangles):
            raise ValueError("transplant requires identical connectivity")
        return Lifting(mesh, self.method, _operator=self)

    def lift(self, w: np.ndarray) -> np.ndarray:
        """Extension coefficients (lift space) of a solid displacement ``w``."""
        ell = np.zeros(self.space.n_total)
        ell[self.gamma_fluid] = np.asarray(w)[self.gamma_solid]
        if np.any(ell):
            rhs = -(self.K[self.interior][:, self.gamma_fluid] @ ell[self.gamma_fluid])
            ell[self.interior] = self.lu.solve(rhs)
        return ell

    def equations(self) -> tuple[sp.csr_matrix, sp.csr_matrix, np.ndarray]:
        """Linear equations defining the extension, one per free lift dof:
        rows ``[interior; gamma]`` of ``D_ell @ ell + D_w @ w = 0``.
        Returns (D_ell, D_w, row_dofs) with columns over all lift / solid dofs."""
        n_ell, n_w = self.space.n_total, self.solid_space.n_total
        rows_int = self.K[self.interior]
        ng = len(self.gamma_fluid)
        sel = sp.csr_matrix((np.ones(ng), (np.arange(ng), self.gamma_fluid)), shape=(ng, n_ell))
        tw = sp.csr_matrix((-np.ones(ng), (np.arange(ng), self.gamma_solid)), shape=(ng, n_w))
        D_ell = sp.vstack([rows_int, sel], format="csr")
        D_w = sp.vstack([sp.csr_matrix((len(self.interior), n_w)), tw], format="csr")
        return D_ell, D_w, np.concatenate([self.interior, self.gamma_fluid])

    def is_m_matrix(self) -> bool:
        """True when all off-diagonal entries of the extension operator are <= 0."""
        A = sp.coo_matrix(self.K)
        off = A.row != A.col
        return bool(np.all(A.data[off] <= 1e-14 * np.abs(A.data).max()))


def lift_trace(w: np.ndarray, mesh: Mesh, lifting: Lifting | None = None) -> np.ndarray:
    """Harmonic extension of the GAMMA0 trace of solid field ``w`` into the fluid."""
    lifting = Lifting(mesh) if lifting is None else lifting
    return lifting.lift(w)


# ---------------------------------------------------------------------------
# Shape velocities
# ---------------------------------------------------------------------------

@dataclass
class PointSamples:
    """Values (..., 2) and gradients (..., 2, 2) of a vector field at a set of points."""

    val: np.ndarray
    grad: np.ndarray

    def scaled(self, a: float) -> "PointSamples":
        return PointSamples(a * self.val, a * self.grad)


class ShapeVelocity:
    """Velocity field V of the domain perturbation Phi_t = id + t V, sampled at
    fluid and solid quadrature points and at the fluid side of GAMMA0.

    Built either from the analytic field (:meth:`analytic`) or from its
    piecewise-linear interpolant on the mesh vertices (:meth:`interpolated`) --
    the latter is exactly the velocity realised by moving mesh vertices.
    """

    def __init__(self, field: VectorField, fluid: PointSamples, solid: PointSamples, edge: PointSamples,
                 kind: str = "analytic"):
        self.field = field
        self.fluid = fluid
        self.solid = solid
        self.edge = edge
        self.kind = kind

    @classmethod
    def analytic(cls, field: VectorField, fluid_space: FunctionSpace, solid_space: FunctionSpace,
                 edge_trace: EdgeTrace) -> "ShapeVelocity":
        def samp(pts):
            return PointSamples(field.eval(pts[..., 0], pts[..., 1]), field.eval_grad(pts[..., 0], pts[..., 1]))

        return cls(field, samp(fluid_space.quad.points), samp(solid_space.quad.points), samp(edge_trace.points))

    @classmethod
    def interpolated(cls, field: VectorField, fluid_space: FunctionSpace, solid_space: FunctionSpace,
                     edge_trace: EdgeTrace) -> "ShapeVelocity":
        mesh = fluid_space.mesh
        nodal = field.eval(mesh.nodes[:, 0], mesh.nodes[:, 1])   # (nv, 2)

        def samp(space: FunctionSpace, bary, cells):
            tri = mesh.triangles[space.cells[cells]]             # (n, 3)
            vals = nodal[tri]                                    # (n, 3, 2)
            inv = space.quad.inv_jac[cells]
            g_ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
            gl = np.einsum("ak,ckd->cad", g_ref, inv)            # (n, 3, 2) grads of barycentrics
            grad = np.einsum("cai,cad->cid", vals, gl)           # (n, 2, 2)
            if bary.ndim == 2:
                val = np.einsum("qa,cai->cqi", bary, vals)
            else:
                val = np.einsum("cqa,cai->cqi", bary, vals)
            nq = val.shape[1]
            return PointSamples(val, np.broadcast_to(grad[:, None], (len(tri), nq, 2, 2)).copy())

        allf = np.arange(len(fluid_space.cells))
        alls = np.arange(len(solid_space.cells))
        return cls(field, samp(fluid_space, fluid_space.quad.bary, allf),
                   samp(solid_space, solid_space.quad.bary, alls),
                   samp(edge_trace.space, edge_trace.bary, edge_trace.local_cells), kind="interpolated")

    def scaled(self, a: float) -> "ShapeVelocity":
        return ShapeVelocity(self.field.scaled(a), self.fluid.scaled(a), self.solid.scaled(a), self.edge.scaled(a),
                             self.kind)

    def combine(self, a: float, other: "ShapeVelocity") -> "ShapeVelocity":
        """a * self + other (fields and samples)."""
        from .expr import add, mul, Const

        f = VectorField([add(mul(Const(a), c1), c2) for c1, c2 in zip(self.field.components, other.field.components)])

        def comb(p, q):
            return PointSamples(a * p.val + q.val, a * p.grad + q.grad)

        return ShapeVelocity(f, comb(self.fluid, other.fluid), comb(self.solid, other.solid),
                             comb(self.edge, other.edge), self.kind)

    def is_zero(self) -> bool:
        return not (np.any(self.fluid.val) or np.any(self.fluid.grad) or np.any(self.solid.val)
                    or np.any(self.solid.grad))


# ---------------------------------------------------------------------------
# Transform state
# ---------------------------------------------------------------------------

@dataclass
class Samples:
    """Pointwise kinematic fields at one family of points."""

    A: np.ndarray          # grad T (..., 2, 2)
    pos: np.ndarray        # T(X)  (..., 2)
    J: np.ndarray = field(init=False)
    G: np.ndarray = field(init=False)
    F: np.ndarray = field(init=False)

    def __post_init__(self):
        self.J = J_of(self.A)
        self.G = G_of(self.A)
        self.F = F_of(self.A)


@dataclass
class TransformState:
    """T = Phi_t + R(trace w) sampled on the fluid (volume and GAMMA0 side);
    ``solid`` holds Phi_t itself on the solid (identity when t = 0)."""

    w: Optional[np.ndarray]
    ell: Optional[np.ndarray]
    fluid: Samples
    edge: Samples
    solid: Samples
    t: float = 0.0
    lifting: Optional[Lifting] = None

    @property
    def j_min(self) -> float:
        return float(min(self.fluid.J.min(), self.edge.J.min()))


def _check_invertible(s: Samples, pts: np.ndarray, j_min: float, where: str):
    bad = np.flatnonzero(s.J.ravel() <= j_min)
    if bad.size:
        k = bad[np.argmin(s.J.ravel()[bad])]
        p = pts.reshape(-1, 2)[k]
        raise SolverError(f"transformation not invertible: det grad T = {s.J.ravel()[k]:.3g} <= {j_min:g} "
                          f"at ({p[0]:.4g}, {p[1]:.4g}) [{where}]", code="NONINVERTIBLE_TRANSFORM",
                          point=tuple(p), J=float(s.J.ravel()[k]))


def build_transform(lifting: Lifting, w: np.ndarray | None, edge_trace: EdgeTrace,
                    t: float = 0.0, V: ShapeVelocity | None = None, j_min: float = 0.0,
                    ell: np.ndarray | None = None) -> TransformState:
    """Sample T = id + tV + R(trace w) on the fluid and Phi_t = id + tV on the solid.

    Raises NONINVERTIBLE_TRANSFORM if det grad T <= ``j_min`` at any sample."""
    fs = lifting.space
    ss = lifting.solid_space
    if ell is None:
        ell = lifting.lift(w) if w is not None else np.zeros(fs.n_total)
    jf = field_jets(fs, ell)
    val_f, grad_f = split_vector_jet(jf)
    je = field_jets(fs, ell, jets=edge_trace.jets, cells=edge_trace.local_cells)
    val_e, grad_e = split_vector_jet(je)
    Af = I2 + grad_f
    Ae = I2 + grad_e
    pf = fs.quad.points + val_f
    pe = edge_trace.points + val_e
    As = np.broadcast_to(I2, ss.quad.points.shape[:2] + (2, 2)).copy()
    ps = ss.quad.points.copy()
    if V is not None and t != 0.0:
        Af = Af + t * V.fluid.grad
        Ae = Ae + t * V.edge.grad
        As = As + t * V.solid.grad
        pf = pf + t * V.fluid.val
        pe = pe + t * V.edge.val
        ps = ps + t * V.solid.val
    ts = TransformState(w=None if w is None else np.asarray(w), ell=ell, fluid=Samples(Af, pf),
                        edge=Samples(Ae, pe), solid=Samples(As, ps), t=t, lifting=lifting)
    _check_invertible(ts.fluid, fs.quad.points, j_min, "fluid")
    _check_invertible(ts.edge, edge_trace.points, j_min, "interface")
    _check_invertible(ts.solid, ss.quad.points, j_min, "solid")
    return ts


def transform_from_gradient(fluid_space: FunctionSpace, edge_trace: EdgeTrace, grad_T, pos_T=None,
                            solid_space: FunctionSpace | None = None) -> TransformState:
    """TransformState from explicit samples of grad T (callable of points or array).

    Used for synthetic/analytic transformations (e.g. manufactured solutions)."""
    def sample(pts):
        A = grad_T(pts) if callable(grad_T) else np.broadcast_to(grad_T, pts.shape[:-1] + (2, 2))
        P = pts if pos_T is None else pos_T(pts)
        return Samples(np.array(A, dtype=float), np.array(P, dtype=float))

    solid_pts = solid_space.quad.points if solid_space is not None else np.zeros((0, 1, 2))
    sol = Samples(np.broadcast_to(I2, solid_pts.shape[:-1] + (2, 2)).copy(), solid_pts.copy())
    return TransformState(w=None, ell=None, fluid=sample(fluid_space.quad.points), edge=sample(edge_trace.points),
                          solid=sol)


# ---------------------------------------------------------------------------
# Pointwise variations (appendix formulas)
# ---------------------------------------------------------------------------

def _lift_grad(ts: TransformState, k: np.ndarray, edge_trace: EdgeTrace | None = None):
    lifting = ts.lifting
    kl = lifting.lift(k)
    if edge_trace is None:
        return split_vector_jet(field_jets(lifting.space, kl))[1]
    return split_vector_jet(field_jets(lifting.space, kl, jets=edge_trace.jets, cells=edge_trace.local_cells))[1]


def dJ_dw(ts: TransformState, k: np.ndarray) -> np.ndarray:
    """D_w J(T) k = tr(cof(grad T)^T grad R(k)) at fluid quadrature points."""
    return dJ(ts.fluid.A, _lift_grad(ts, k))


def dG_dw(ts: TransformState, k: np.ndarray) -> np.ndarray:
    return dG(ts.fluid.A, _lift_grad(ts, k))


def dF_dw(ts: TransformState, k: np.ndarray) -> np.ndarray:
    return dF(ts.fluid.A, _lift_grad(ts, k))


def dJ_dt(ts: TransformState, V: ShapeVelocity) -> np.ndarray:
    """d/dt J(T^t_w) = tr(cof(grad T)^T grad V) at fluid quadrature points."""
    return dJ(ts.fluid.A, V.fluid.grad)


def dG_dt(ts: TransformState, V: ShapeVelocity) -> np.ndarray:
    return dG(ts.fluid.A, V.fluid.grad)


def dF_dt(ts: TransformState, V: ShapeVelocity) -> np.ndarray:
    return dF(ts.fluid.A, V.fluid.grad)


# ---------------------------------------------------------------------------
# Piola identity diagnostic
# ---------------------------------------------------------------------------

def piola_residual(ts: TransformState, fluid_space: FunctionSpace) -> float:
    """L2 norm over the fluid of the row-wise divergence of G after L2-projecting
    each entry of G onto continuous P1."""
    from .fem import P1

    Q = FunctionSpace(fluid_space.mesh, FLUID, P1)
    M = assemble_volume_form(Q, Q, mass_coef(Q))
    lu = Factorization(M)
    G = ts.fluid.G
    if np.all(G == G.reshape(-1, 2, 2)[0]):
        return 0.0  # a constant projects onto itself: divergence-free exactly
    comps = np.empty((2, 2, Q.n_total))
    for i in range(2):
        for j in range(2):
            c = np.zeros(G.shape[:2] + (3,))
            c[..., 0] = G[..., i, j]
            comps[i, j] = lu.solve(assemble_volume_vector(Q, c))
    div = np.zeros((2,) + G.shape[:2])
    for i in range(2):
        for j in range(2):
            div[i] += field_jets(Q, comps[i, j])[..., 1 + j]
    w = Q.quad.weights
    return float(np.sqrt(np.sum(w * (div ** 2).sum(axis=0))))
