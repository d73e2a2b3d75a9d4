"""Taylor-Hood (P2 vector / P1 scalar) finite elements on region-tagged triangles.

Assembly is written in terms of *jets*: at each quadrature point a scalar
basis function contributes the triple (value, d/dx, d/dy), and a vector basis
function contributes that triple in one of its two components.  A bilinear
form is then fully described by a pointwise coefficient tensor ``C`` with

    a(u, v) = sum_q w_q  jet(v)_q . C_q . jet(u)_q,

so any variable-coefficient kernel -- (grad v) F : grad w, q (G : grad w),
the linearisations of these in the displacement -- is assembled by the same
two routines.  Jet index layout: ``3 * component + {0: value, 1: d/dx, 2: d/dy}``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError
from .mesh import FLUID, GAMMA0, SOLID, Mesh

# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

# Symmetric 12-point rule exact for polynomials of degree 6 (weights sum to 1).
_D6 = [
    (0.116786275726379, (0.501426509658179, 0.249286745170910, 0.249286745170910)),
    (0.050844906370207, (0.873821971016996, 0.063089014491502, 0.063089014491502)),
    (0.082851075618374, (0.053145049844817, 0.310352451033784, 0.636502499121399)),
]


def _permutations(b):
    a, c, d = b
    if c == d:
        return [(a, c, d), (c, a, d), (c, d, a)]
    return [(a, c, d), (a, d, c), (c, a, d), (c, d, a), (d, a, c), (d, c, a)]


def triangle_rule() -> tuple[np.ndarray, np.ndarray]:
    """Barycentric points (12, 3) and weights (12,) of the degree-6 rule; weights sum to 1."""
    pts, wts = [], []
    for w, b in _D6:
        for p in _permutations(b):
            pts.append(p)
            wts.append(w)
    pts = np.asarray(pts)
    pts /= pts.sum(axis=1, keepdims=True)
    wts = np.asarray(wts)
    return pts, wts / wts.sum()


def edge_rule(n: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre points on [0, 1] and weights summing to 1."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


# ---------------------------------------------------------------------------
# Reference basis functions (barycentric coordinates l0, l1, l2)
# ---------------------------------------------------------------------------

_DLAMBDA = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # d(l_i)/d(xi, eta)
_P2_EDGES = ((0, 1), (1, 2), (2, 0))


def p2_basis(bary: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values (..., 6) and reference gradients (..., 6, 2) of the quadratic basis."""
    lam = np.asarray(bary, dtype=float)
    val = np.empty(lam.shape[:-1] + (6,))
    grd = np.empty(lam.shape[:-1] + (6, 2))
    for i in range(3):
        val[..., i] = lam[..., i] * (2 * lam[..., i] - 1)
        grd[..., i, :] = (4 * lam[..., i] - 1)[..., None] * _DLAMBDA[i]
    for k, (i, j) in enumerate(_P2_EDGES):
        val[..., 3 + k] = 4 * lam[..., i] * lam[..., j]
        grd[..., 3 + k, :] = 4 * (lam[..., j][..., None] * _DLAMBDA[i] + lam[..., i][..., None] * _DLAMBDA[j])
    return val, grd


def p1_basis(bary: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lam = np.asarray(bary, dtype=float)
    grd = np.broadcast_to(_DLAMBDA, lam.shape[:-1] + (3, 2)).copy()
    return lam.copy(), grd


# ---------------------------------------------------------------------------
# Function spaces
# ---------------------------------------------------------------------------

P2VEC = "P2vec"
P1 = "P1"


class FunctionSpace:
    """Vector-P2 or scalar-P1 space on one region with homogeneous Dirichlet tags.

    Coefficient vectors always have length :attr:`n_total` (constrained
    entries included, held at 0); :attr:`free` lists unconstrained dofs.
    Vector dofs are interleaved: dof ``2 * node + component``.
    """

    def __init__(self, mesh: Mesh, region: int, kind: str, dirichlet_tags: Iterable[int] = ()):
        if kind not in (P2VEC, P1):
            raise ValueError(f"unknown element kind {kind!r}")
        self.mesh = mesh
        self.region = region
        self.kind = kind
        self.dirichlet_tags = tuple(sorted(set(dirichlet_tags)))
        self.cells = np.flatnonzero(mesh.regions == region)
        if kind == P2VEC:
            glob = mesh.triangle_p2[self.cells]
        else:
            glob = mesh.triangles[self.cells]
        self.node_ids = np.unique(glob)                       # global (P2 or vertex) node ids
        self.local_of = -np.ones(mesh.n_p2_nodes if kind == P2VEC else mesh.n_nodes, dtype=np.int64)
        self.local_of[self.node_ids] = np.arange(len(self.node_ids))
        local_nodes = self.local_of[glob]                     # (nc, nloc_nodes)
        if kind == P2VEC:
            self.n_comp = 2
            self.cell_dofs = np.stack([2 * local_nodes, 2 * local_nodes + 1], axis=2).reshape(len(self.cells), 12)
        else:
            self.n_comp = 1
            self.cell_dofs = local_nodes
        self.n_total = self.n_comp * len(self.node_ids)
        constrained = np.zeros(self.n_total, dtype=bool)
        if self.dirichlet_tags:
            bn = mesh.boundary_p2_nodes(self.dirichlet_tags)
            if kind == P1:
                bn = bn[bn < mesh.n_nodes]
            loc = self.local_of[bn]
            loc = loc[loc >= 0]
            for c in range(self.n_comp):
                constrained[self.n_comp * loc + c] = True
        self.constrained = constrained
        self.free = np.flatnonzero(~constrained)

    @property
    def ndof(self) -> int:
        """Number of unconstrained degrees of freedom."""
        return len(self.free)

    @property
    def node_coords(self) -> np.ndarray:
        pts = self.mesh.p2_nodes if self.kind == P2VEC else self.mesh.nodes
        return pts[self.node_ids]

    @property
    def jet_dim(self) -> int:
        return 3 * self.n_comp

    @property
    def n_local(self) -> int:
        return self.cell_dofs.shape[1]

    def interpolate(self, fn) -> np.ndarray:
        """Nodal interpolant of ``fn`` (VectorField for P2vec, scalar callable/Expr for P1).

        Constrained dofs are left at zero."""
        from .expr import Expr, VectorField, evaluate

        pts = self.node_coords
        if self.kind == P2VEC:
            vals = fn.eval(pts[:, 0], pts[:, 1]) if isinstance(fn, VectorField) else np.asarray(fn(pts))
            out = np.asarray(vals, dtype=float).reshape(-1)
        else:
            if isinstance(fn, Expr):
                out = np.broadcast_to(evaluate(fn, {"x": pts[:, 0], "y": pts[:, 1]}), (len(pts),)).astype(float)
            else:
                out = np.asarray(fn(pts), dtype=float).reshape(-1)
        out = out.copy()
        out[self.constrained] = 0.0
        return out

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_total)

    def dofs_of_nodes(self, nodes: np.ndarray) -> np.ndarray:
        """Local dofs belonging to the given global node ids (all components)."""
        loc = self.local_of[np.asarray(nodes)]
        loc = loc[loc >= 0]
        return (self.n_comp * loc[:, None] + np.arange(self.n_comp)).ravel()

    # -- quadrature data ---------------------------------------------------
    @cached_property
    def quad(self) -> "CellQuadrature":
        return CellQuadrature(self.mesh, self.cells)

    @cached_property
    def jets(self) -> np.ndarray:
        """Basis jets at volume quadrature points, shape (nc, nq, n_local, jet_dim)."""
        return basis_jets(self.kind, self.quad.bary, self.quad.inv_jac)


class CellQuadrature:
    """Affine geometry and quadrature points of a set of triangles."""

    def __init__(self, mesh: Mesh, cells: np.ndarray):
        self.cells = cells
        p = mesh.nodes[mesh.triangles[cells]]           # (nc, 3, 2)
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # columns
        self.det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        self.inv_jac = np.linalg.inv(jac)               # (nc, 2, 2)
        self.bary, wts = triangle_rule()
        self.points = np.einsum("qk,ckd->cqd", self.bary, p)  # (nc, nq, 2)
        self.weights = 0.5 * np.abs(self.det)[:, None] * wts[None, :]  # (nc, nq)

    @property
    def n_points(self) -> int:
        return self.bary.shape[0]


def basis_jets(kind: str, bary: np.ndarray, inv_jac: np.ndarray) -> np.ndarray:
    """Jets of all local basis functions.

    ``bary`` is (nq, 3) (shared) or (nc, nq, 3) (per cell); ``inv_jac`` is (nc, 2, 2).
    Returns (nc, nq, n_local, jet_dim)."""
    val, grd = (p2_basis if kind == P2VEC else p1_basis)(bary)
    nc = inv_jac.shape[0]
    if val.ndim == 2:
        val = np.broadcast_to(val, (nc,) + val.shape)
        grd = np.broadcast_to(grd, (nc,) + grd.shape)
    # physical gradient: grad = J^{-T} grad_ref  ->  g_d = sum_k ref_k invJ[k, d]
    pgrad = np.einsum("cqak,ckd->cqad", grd, inv_jac)
    nb = val.shape[-1]
    if kind == P1:
        jets = np.empty(val.shape[:2] + (nb, 3))
        jets[..., 0] = val
        jets[..., 1:] = pgrad
        return jets
    nq = val.shape[1]
    jets = np.zeros((nc, nq, nb, 2, 6))
    for c in range(2):
        jets[:, :, :, c, 3 * c] = val
        jets[:, :, :, c, 3 * c + 1:3 * c + 3] = pgrad
    return jets.reshape(nc, nq, 2 * nb, 6)


# ---------------------------------------------------------------------------
# Boundary (edge) traces
# ---------------------------------------------------------------------------

class EdgeTrace:
    """Quadrature on boundary edges with a given tag, seen from one region's side.

    ``normals`` point out of SOLID on GAMMA0 (the interface normal n0)
    regardless of which side the trace is taken from."""

    def __init__(self, space: FunctionSpace, tag: int = GAMMA0, n_points: int = 4):
        mesh = space.mesh
        self.space = space
        self.bedges = mesh.edges_with_tag(tag)
        cell_of = {int(t): k for k, t in enumerate(space.cells)}
        tris = np.array([mesh.side_triangle(e, space.region) for e in self.bedges], dtype=np.int64)
        self.local_cells = np.array([cell_of[int(t)] for t in tris], dtype=np.int64)
        s, w = edge_rule(n_points)
        a = mesh.nodes[mesh.boundary_edges[self.bedges, 0]]
        b = mesh.nodes[mesh.boundary_edges[self.bedges, 1]]
        length = np.linalg.norm(b - a, axis=1)
        self.points = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]  # (ne, ng, 2)
        self.weights = length[:, None] * w[None, :]
        q = space.quad
        inv = q.inv_jac[self.local_cells]
        p0 = mesh.nodes[mesh.triangles[tris, 0]]
        ref = np.einsum("ckd,cgd->cgk", inv, self.points - p0[:, None, :])
        self.bary = np.concatenate([1.0 - ref.sum(axis=2, keepdims=True), ref], axis=2)
        self.jets = basis_jets(space.kind, self.bary, inv)
        d = b - a
        n = np.stack([d[:, 1], -d[:, 0]], axis=1) / length[:, None]
        # orient out of the SOLID neighbour
        solid = np.array([mesh.side_triangle(e, SOLID) if tag == GAMMA0 else
                          mesh.side_triangle(e, space.region) for e in self.bedges], dtype=np.int64)
        third = np.array([[v for v in mesh.triangles[t] if v not in mesh.boundary_edges[e]][0]
                          for t, e in zip(solid, self.bedges)], dtype=np.int64)
        flip = np.einsum("ij,ij->i", mesh.nodes[third] - a, n) > 0
        n[flip] *= -1
        self.normals = n

    @property
    def cell_dofs(self) -> np.ndarray:
        return self.space.cell_dofs[self.local_cells]


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _scatter(rows: np.ndarray, cols: np.ndarray, local: np.ndarray, shape) -> sp.csr_matrix:
    r = np.broadcast_to(rows[:, :, None], local.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], local.shape).ravel()
    return sp.csr_matrix((local.ravel(), (r, c)), shape=shape)


def local_bilinear(test_jets, trial_jets, coef, weights) -> np.ndarray:
    """Element matrices sum_q w_q jet_t . C . jet_r, shape (n_el, n_test, n_trial)."""
    tmp = np.matmul(test_jets, coef)                               # (e, q, a, jr)
    tmp *= weights[:, :, None, None]
    return np.matmul(tmp, np.swapaxes(trial_jets, 2, 3)).sum(axis=1)


def assemble_volume_form(test: FunctionSpace, trial: FunctionSpace, coef: np.ndarray) -> sp.csr_matrix:
    """Matrix of the bilinear form with pointwise coefficient tensor ``coef``
    of shape (nc, nq, test.jet_dim, trial.jet_dim); rows index test dofs."""
    if test.region != trial.region or test.mesh is not trial.mesh:
        raise ValueError("volume forms couple spaces on the same mesh region")
    _check_coef(coef, test, trial.jet_dim)
    local = local_bilinear(test.jets, trial.jets, coef, test.quad.weights)
    return _scatter(test.cell_dofs, trial.cell_dofs, local, (test.n_total, trial.n_total))


def assemble_volume_vector(test: FunctionSpace, coef: np.ndarray) -> np.ndarray:
    """Vector sum_q w_q jet_t . c_q for a pointwise jet-dual ``coef`` (nc, nq, jet_dim)."""
    _check_coef(coef, test, None)
    local = np.einsum("cqaj,cqj,cq->ca", test.jets, coef, test.quad.weights)
    out = np.zeros(test.n_total)
    np.add.at(out, test.cell_dofs.ravel(), local.ravel())
    return out


def assemble_edge_form(test: EdgeTrace, trial: EdgeTrace, coef: np.ndarray) -> sp.csr_matrix:
    """Edge (interface) bilinear form; test and trial traces may come from different sides."""
    if not np.array_equal(test.bedges, trial.bedges):
        raise ValueError("edge traces must cover the same edges")
    local = local_bilinear(test.jets, trial.jets, coef, test.weights)
    return _scatter(test.cell_dofs, trial.cell_dofs, local, (test.space.n_total, trial.space.n_total))


def assemble_interface_form(test: EdgeTrace, traction: np.ndarray) -> np.ndarray:
    """Vector of integral over GAMMA0 of (test . traction); ``traction`` is (ne, ng, 2)."""
    if test.space.kind != P2VEC:
        raise ValueError("interface tractions act on vector spaces")
    coef = np.zeros(traction.shape[:2] + (6,))
    coef[..., 0] = traction[..., 0]
    coef[..., 3] = traction[..., 1]
    local = np.einsum("cqaj,cqj,cq->ca", test.jets, coef, test.weights)
    out = np.zeros(test.space.n_total)
    np.add.at(out, test.cell_dofs.ravel(), local.ravel())
    return out


def _check_coef(coef, test, jr):
    from .errors import SolverError as _SE

    want = (len(test.cells), test.quad.n_points, test.jet_dim) + (() if jr is None else (jr,))
    if coef.shape != want:
        raise _SE(f"coefficient samples have shape {coef.shape}, expected {want}",
                  code="QUADRATURE_DATA_MISSING")


# ---------------------------------------------------------------------------
# Field evaluation
# ---------------------------------------------------------------------------

def field_jets(space: FunctionSpace, coeffs: np.ndarray, jets: np.ndarray | None = None,
               cells: np.ndarray | None = None) -> np.ndarray:
    """Jet of a discrete field at quadrature points: (n_el, nq, jet_dim)."""
    jets = space.jets if jets is None else jets
    dofs = space.cell_dofs if cells is None else space.cell_dofs[cells]
    return np.einsum("cqaj,ca->cqj", jets, np.asarray(coeffs)[dofs])


def split_vector_jet(j: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(value (..., 2), gradient (..., 2, 2)) from a vector jet with grad[i, k] = d u_i / d x_k."""
    val = j[..., [0, 3]]
    grad = np.stack([j[..., 1:3], j[..., 4:6]], axis=-2)
    return val, grad


def vector_jet(val: np.ndarray | None, grad: np.ndarray | None, shape) -> np.ndarray:
    """Assemble a vector jet-dual array from value and gradient parts (either may be None)."""
    out = np.zeros(tuple(shape) + (6,))
    if val is not None:
        out[..., 0] = val[..., 0]
        out[..., 3] = val[..., 1]
    if grad is not None:
        out[..., 1:3] = grad[..., 0, :]
        out[..., 4:6] = grad[..., 1, :]
    return out


# ---------------------------------------------------------------------------
# Linear systems
# ---------------------------------------------------------------------------

@dataclass
class SparseSystem:
    """Square sparse system; ``gauge`` (optional) adds one mean-value constraint row
    through a Lagrange multiplier appended as the last unknown."""

    matrix: sp.spmatrix
    rhs: np.ndarray
    gauge: np.ndarray | None = None

    def augmented(self) -> tuple[sp.csc_matrix, np.ndarray]:
        A = sp.csr_matrix(self.matrix)
        if A.shape[0] != A.shape[1] or A.shape[0] != len(self.rhs):
            raise SolverError(f"inconsistent system dimensions {A.shape} / {len(self.rhs)}",
                              code="SINGULAR_SYSTEM", pivot=None)
        b = np.asarray(self.rhs, dtype=float)
        if self.gauge is None:
            return sp.csc_matrix(A), b
        m = sp.csr_matrix(np.asarray(self.gauge, dtype=float).reshape(1, -1))
        K = sp.bmat([[A, m.T], [m, None]], format="csc")
        return K, np.concatenate([b, [0.0]])


class Factorization:
    """Deterministic sparse LU (SuperLU, fixed column ordering) with refinement."""

    def __init__(self, matrix: sp.spmatrix):
        self.matrix = sp.csc_matrix(matrix)
        try:
            self.lu = spla.splu(self.matrix, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}", code="SINGULAR_SYSTEM", pivot=None) from None
        diag = np.abs(self.lu.U.diagonal())
        scale = diag.max() if diag.size else 1.0
        tiny = np.flatnonzero(diag <= 1e-13 * scale)
        if tiny.size:
            pivot = int(self.lu.perm_c[tiny[0]])
            raise SolverError(f"matrix is numerically singular (pivot {pivot})", code="SINGULAR_SYSTEM",
                              pivot=pivot)

    def solve(self, b: np.ndarray, trans: bool = False) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        t = "T" if trans else "N"
        x = self.lu.solve(b, trans=t)
        A = self.matrix.T if trans else self.matrix
        r = b - A @ x
        x = x + self.lu.solve(r, trans=t)
        return x


def solve(system: SparseSystem) -> np.ndarray:
    """Solve ``system``; returns the primal unknowns (multiplier dropped)."""
    K, b = system.augmented()
    if K.shape[0] == 0:
        return np.zeros(0)
    x = Factorization(K).solve(b)
    if not np.all(np.isfinite(x)):
        raise SolverError("solution contains non-finite values", code="SINGULAR_SYSTEM", pivot=None)
    n = system.matrix.shape[0]
    return x[:n]


def restrict(A: sp.spmatrix, free_rows: np.ndarray, free_cols: np.ndarray) -> sp.csr_matrix:
    return sp.csr_matrix(A)[free_rows][:, free_cols]


def solve_constrained(A: sp.spmatrix, b: np.ndarray, free: np.ndarray, gauge: np.ndarray | None = None,
                      n_total: int | None = None) -> np.ndarray:
    """Solve with homogeneous Dirichlet dofs eliminated (symmetric row/column removal)."""
    n = A.shape[0] if n_total is None else n_total
    Af = restrict(A, free, free)
    g = None if gauge is None else np.asarray(gauge)[free]
    xf = solve(SparseSystem(Af, np.asarray(b)[free], g))
    x = np.zeros(n)
    x[free] = xf
    return x


# ---------------------------------------------------------------------------
# Standard kernels and norms
# ---------------------------------------------------------------------------

def const_coef(space_t: FunctionSpace, space_r: FunctionSpace, block: np.ndarray) -> np.ndarray:
    """Broadcast a constant (jt, jr) coefficient to every quadrature point."""
    q = space_t.quad
    return np.broadcast_to(block, (len(q.cells), q.n_points) + block.shape).copy()


def stiffness_coef(space: FunctionSpace, coeff: np.ndarray | None = None) -> np.ndarray:
    """Coefficient tensor of (grad u) C : grad v (vector) or grad u . C grad v (scalar);
    ``coeff`` is a pointwise (nc, nq, 2, 2) matrix, identity if None."""
    q = space.quad
    nc, nq = len(q.cells), q.n_points
    C = np.broadcast_to(np.eye(2), (nc, nq, 2, 2)) if coeff is None else coeff
    out = np.zeros((nc, nq, space.jet_dim, space.jet_dim))
    for c in range(space.n_comp):
        # sum_kl d_k u_c C_kl d_l v_c  -> test jet index d_l v, trial jet index d_k u
        out[:, :, 3 * c + 1:3 * c + 3, 3 * c + 1:3 * c + 3] = np.swapaxes(C, 2, 3)
    return out


def mass_coef(space: FunctionSpace) -> np.ndarray:
    q = space.quad
    out = np.zeros((len(q.cells), q.n_points, space.jet_dim, space.jet_dim))
    for c in range(space.n_comp):
        out[:, :, 3 * c, 3 * c] = 1.0
    return out


def mean_weights(space: FunctionSpace) -> np.ndarray:
    """Vector m with m . coeffs = integral of the field (scalar spaces)."""
    q = space.quad
    coef = np.zeros((len(q.cells), q.n_points, space.jet_dim))
    coef[..., 0] = 1.0
    return assemble_volume_vector(space, coef)


def compute_norm(space: FunctionSpace, coeffs: np.ndarray, kind: str = "L2") -> float:
    """L2 norm or H1 seminorm of a discrete field (exact quadrature for P2/P1)."""
    j = field_jets(space, coeffs)
    w = space.quad.weights
    if kind == "L2":
        vals = j[..., 0::3]
    elif kind in ("H1-semi", "H1semi", "H1_semi"):
        vals = np.concatenate([j[..., 1::3], j[..., 2::3]], axis=-1)
    elif kind == "H1":
        vals = j
    else:
        raise ValueError(f"unknown norm kind {kind!r}")
    return float(np.sqrt(np.sum(w[..., None] * vals ** 2)))


def error_norms(space: FunctionSpace, coeffs: np.ndarray, exact_val: Callable, exact_grad: Callable | None = None,
                subtract_mean: bool = False) -> dict:
    """L2 and H1-semi errors against an analytic field evaluated at quadrature points.

    ``exact_val(x, y)`` returns (..., n_comp) (or (...) for scalars); ``exact_grad``
    returns (..., n_comp, 2).  With ``subtract_mean`` both fields are compared
    modulo their means (pressure-like unknowns)."""
    q = space.quad
    j = field_jets(space, coeffs)
    x, y = q.points[..., 0], q.points[..., 1]
    w = q.weights
    uh = j[..., 0::3]
    ue = np.asarray(exact_val(x, y), dtype=float).reshape(uh.shape)
    diff = uh - ue
    if subtract_mean:
        area = w.sum()
        diff = diff - (w[..., None] * diff).sum(axis=(0, 1)) / area
    out = {"L2": float(np.sqrt(np.sum(w[..., None] * diff ** 2)))}
    if exact_grad is not None:
        gh = np.stack([j[..., 1::3], j[..., 2::3]], axis=-1)  # (..., comp, 2)
        ge = np.asarray(exact_grad(x, y), dtype=float).reshape(gh.shape)
        out["H1-semi"] = float(np.sqrt(np.sum(w[..., None, None] * (gh - ge) ** 2)))
    return out


def refined_p1_laplacian(space: FunctionSpace) -> sp.csr_matrix:
    """Scalar Laplacian of the P1 element on the 4-to-1 refinement of each cell,
    indexed by the quadratic nodes of a P2vec space (per node, not per component)."""
    mesh = space.mesh
    glob = mesh.triangle_p2[space.cells]
    loc = space.local_of[glob]
    pts = mesh.p2_nodes[glob]          # (nc, 6, 2)
    children = np.array([[0, 3, 5], [3, 1, 4], [5, 4, 2], [3, 4, 5]])
    rows, cols, vals = [], [], []
    for ch in children:
        p = pts[:, ch]                                  # (nc, 3, 2)
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        inv = np.linalg.inv(jac)
        g = np.einsum("ak,ckd->cad", _DLAMBDA, inv)       # (nc, 3, 2)
        K = 0.5 * np.abs(det)[:, None, None] * np.einsum("cad,cbd->cab", g, g)
        li = loc[:, ch]
        rows.append(np.broadcast_to(li[:, :, None], K.shape).ravel())
        cols.append(np.broadcast_to(li[:, None, :], K.shape).ravel())
        vals.append(K.ravel())
    n = len(space.node_ids)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def spaces_for(mesh: Mesh):
    """The four Taylor-Hood spaces of the coupled problem:
    fluid velocity (zero on OUTER and GAMMA0), fluid pressure,
    solid displacement (zero on GAMMA_OMEGA), solid multiplier."""
    from .mesh import GAMMA_OMEGA, OUTER

    return (FunctionSpace(mesh, FLUID, P2VEC, (OUTER, GAMMA0)),
            FunctionSpace(mesh, FLUID, P1),
            FunctionSpace(mesh, SOLID, P2VEC, (GAMMA_OMEGA,)),
            FunctionSpace(mesh, SOLID, P1))
