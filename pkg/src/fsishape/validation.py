"""Verification studies: manufactured solutions, Piola refinement, contraction
sweeps, finite-difference checks of shape and material derivatives.

Every study returns a :class:`StudyResult` -- a table of rows plus named
threshold checks -- so that the command line can write one CSV per study and a
PASS/FAIL summary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import FsiError, SolverError
from .expr import Const, Expr, VectorField, add, check_compact_support, diff, evaluate, mul, neg, parse_field
from .fem import EdgeTrace, compute_norm, error_norms
from .fsi import (Discretization, ProblemData, SolverSettings, fsi_fixed_point, solve_perturbed_stokes,
                  solve_structure_mixed, state_norm)
from .kinematics import Lifting, build_transform, piola_residual, transform_from_gradient
from .mesh import GeometryConfig, deform_mesh, generate_box_pair_mesh
from .sensitivity import (FunctionalSpec, Linearization, ShapeGradientReport, eval_functional,
                          shape_derivative_adjoint, shape_derivative_direct, solve_adjoint, solve_material_derivatives)

STUDY_KINDS = ("MMS_STOKES", "MMS_STRUCTURE", "PIOLA_REFINE", "CONTRACTION_SWEEP", "SHAPE_FD", "MATERIAL_FD")

# check name -> (comparison, default threshold)
DEFAULT_THRESHOLDS: dict[str, dict[str, tuple[str, float]]] = {
    "MMS_STOKES": {"v_L2_order": (">=", 2.8), "v_H1_order": (">=", 1.9), "q_L2_order": (">=", 1.9)},
    "MMS_STRUCTURE": {"w_H1_order": (">=", 1.9), "s_L2_order": (">=", 1.9)},
    "PIOLA_REFINE": {"affine_residual": ("<=", 1e-12), "order": (">=", 1.0)},
    "CONTRACTION_SWEEP": {"max_rate": ("<", 1.0), "monotone_violation": ("<=", 0.05),
                          "small_end_ratio_factor": ("<=", 2.0), "estimate_spread": ("<=", 0.05)},
    "SHAPE_FD": {"direct_adjoint_gap": ("<=", 1e-9), "fd_order_min": (">=", 1.8), "fd_order_max": ("<=", 2.2),
                 "zero_direction": ("<=", 0.0), "linearity_gap": ("<=", 1e-9)},
    "MATERIAL_FD": {"v_rel_H1": ("<=", 1e-3), "w_rel_H1": ("<=", 1e-3), "linearity_gap": ("<=", 1e-10)},
}


@dataclass
class StudyPlan:
    """What to run: kind, refinement levels / load scales / FD steps, seed, thresholds."""

    kind: str
    name: str = ""
    levels: tuple = (8, 16, 32)
    load_scales: tuple = (0.0, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0)
    fd_steps: tuple = (1e-2, 5e-3, 2.5e-3, 1.25e-3)
    seed: int = 0
    n_directions: int = 3
    variant: str = "identity"
    zero: bool = False
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in STUDY_KINDS:
            raise ValueError(f"unknown study kind {self.kind!r}; expected one of {', '.join(STUDY_KINDS)}")
        if not self.name:
            self.name = self.kind.lower() + ("" if self.variant == "identity" else "_" + self.variant)
        self.levels = tuple(int(n) for n in self.levels)
        self.fd_steps = tuple(float(t) for t in self.fd_steps)
        self.load_scales = tuple(float(e) for e in self.load_scales)
        if self.kind in ("MMS_STOKES", "MMS_STRUCTURE", "PIOLA_REFINE") and len(self.levels) < 3:
            raise ValueError("order estimation needs at least 3 refinement levels")
        if any(b >= a for a, b in zip(self.fd_steps, self.fd_steps[1:])):
            raise ValueError("finite-difference steps must be strictly decreasing")
        unknown = set(self.thresholds) - set(DEFAULT_THRESHOLDS[self.kind])
        if unknown:
            raise ValueError(f"unknown thresholds for {self.kind}: {sorted(unknown)}")


@dataclass
class Check:
    name: str
    value: float
    op: str
    threshold: float

    @property
    def passed(self) -> bool:
        v, t = self.value, self.threshold
        if v is None or (isinstance(v, float) and math.isnan(v)):
            return False
        return {">=": v >= t, "<=": v <= t, "<": v < t, ">": v > t}[self.op]

    def describe(self) -> str:
        return f"{self.name} = {self.value:.6g} (require {self.op} {self.threshold:g})"


@dataclass
class StudyResult:
    kind: str
    name: str
    rows: list = field(default_factory=list)
    columns: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    error: str = ""

    @property
    def passed(self) -> bool:
        return not self.error and all(c.passed for c in self.checks)

    def check(self, name: str) -> Check:
        return next(c for c in self.checks if c.name == name)


def _make_checks(plan: StudyPlan, values: dict) -> list[Check]:
    out = []
    for name, (op, default) in DEFAULT_THRESHOLDS[plan.kind].items():
        if name in values:
            out.append(Check(name, float(values[name]), op, float(plan.thresholds.get(name, default))))
    return out


def observed_orders(errors: Sequence[float], hs: Sequence[float]) -> list[float]:
    """Successive orders log(e_k / e_{k+1}) / log(h_k / h_{k+1})."""
    out = []
    for (e0, e1), (h0, h1) in zip(zip(errors, errors[1:]), zip(hs, hs[1:])):
        out.append(math.log(e0 / e1) / math.log(h0 / h1) if e0 > 0 and e1 > 0 else float("nan"))
    return out


# ---------------------------------------------------------------------------
# Manufactured solutions
# ---------------------------------------------------------------------------

def _laplacian(e: Expr) -> Expr:
    return add(diff(diff(e, "x"), "x"), diff(diff(e, "y"), "y"))


def _curl(psi: Expr) -> VectorField:
    return VectorField([diff(psi, "y"), neg(diff(psi, "x"))])


def stokes_force(u: VectorField, p: Expr, nu: float) -> VectorField:
    """-nu Lap u + grad p, symbolically."""
    return VectorField([add(mul(Const(-nu), _laplacian(c)), diff(p, v)) for c, v in zip(u.components, "xy")])


@dataclass
class Manufactured:
    """Exact fields (callables of x, y) and the data producing them."""

    data: ProblemData
    u: VectorField
    p: Expr
    transform: VectorField | None = None


def stokes_manufactured(nu: float = 1.0, zero: bool = False) -> Manufactured:
    """Divergence-free velocity (stream function) vanishing with its gradient on the
    boundary of the fluid box [1, 2] x [0, 1], and a smooth pressure."""
    if zero:
        psi, p = Const(0.0), Const(0.0)
    else:
        psi = parse_field("(x-1)^2*(2-x)^2*y^2*(1-y)^2*exp(x*y)")
        p = parse_field("sin(pi*x)*cos(pi*y)")
    u = _curl(psi)
    return Manufactured(ProblemData(stokes_force(u, p, nu), VectorField.zero(), nu, 1.0), u, p)


def structure_manufactured(mu: float = 1.0, zero: bool = False) -> Manufactured:
    """Divergence-free displacement on the solid box [0, 1]^2, clamped on x = 0, y = 0, y = 1."""
    if zero:
        psi, s = Const(0.0), Const(0.0)
    else:
        psi = parse_field("x^2*y^2*(1-y)^2*exp(x-y)")
        s = parse_field("cos(pi*x)*sin(y)+x")
    w = _curl(psi)
    return Manufactured(ProblemData(VectorField.zero(), stokes_force(w, s, mu), 1.0, mu), w, s)


# Smooth self-map of the fluid box, identity on its boundary.
BOX_TRANSFORM = ("0.06*sin(pi*(x-1))*sin(pi*y)", "0.04*sin(pi*(x-1))*sin(2*pi*y)")


def run_mms(plan: StudyPlan) -> StudyResult:
    """Convergence table on the structured box pair for the fluid or structure solver.

    Fluid variants: ``identity`` (T = id) and ``transform`` (T a smooth analytic
    self-map of the fluid box; exact transported fields are u o T and p o T)."""
    res = StudyResult(plan.kind, plan.name)
    fluid = plan.kind == "MMS_STOKES"
    man = stokes_manufactured(zero=plan.zero) if fluid else structure_manufactured(zero=plan.zero)
    Tdisp = VectorField.parse(BOX_TRANSFORM) if (fluid and plan.variant == "transform") else None
    hs, errs = [], {"v_L2": [], "v_H1": [], "q_L2": []} if fluid else {"w_L2": [], "w_H1": [], "s_L2": []}
    try:
        for n in plan.levels:
            d = Discretization(generate_box_pair_mesh(n))
            if fluid:
                e = _stokes_errors(d, man, Tdisp)
            else:
                e = _structure_errors(d, man)
            for k, val in zip(errs, e):
                errs[k].append(val)
            hs.append(1.0 / n)
            res.rows.append({"level": n, "h": 1.0 / n, **{k: errs[k][-1] for k in errs}})
    except FsiError as exc:
        res.error = f"{exc.code}: {exc.args[0]}"
    keys = list(errs)
    orders = {k: observed_orders(errs[k], hs) for k in keys}
    for i, row in enumerate(res.rows):
        for k in keys:
            row[k + "_order"] = orders[k][i - 1] if i > 0 else float("nan")
    res.columns = ["level", "h"] + [c for k in keys for c in (k, k + "_order")]
    if plan.zero:
        res.checks = [Check(k + "_max", max(errs[k]) if errs[k] else float("nan"), "<=", 0.0) for k in keys]
        return res
    last = {k + "_order": orders[k][-1] for k in keys if orders[k]}
    res.checks = _make_checks(plan, last)
    return res


def _stokes_errors(d: Discretization, man: Manufactured, Tdisp: VectorField | None):
    u, p = man.u, man.p
    if Tdisp is None:
        ts = d.transform(None)
        Tpos = lambda x, y: (x, y)
        gradT = None
    else:
        def Tpos(x, y):
            dsp = Tdisp.eval(x, y)
            return x + dsp[..., 0], y + dsp[..., 1]

        def gradT(x, y):
            return np.eye(2) + Tdisp.eval_grad(x, y)

        ts = transform_from_gradient(d.vf, d.tr_l, lambda P: gradT(P[..., 0], P[..., 1]),
                                     lambda P: np.stack(Tpos(P[..., 0], P[..., 1]), axis=-1))
    v, q = solve_perturbed_stokes(d, ts, man.data)

    def val(x, y):
        X, Y = Tpos(x, y)
        return u.eval(X, Y)

    def grd(x, y):
        X, Y = Tpos(x, y)
        g = u.eval_grad(X, Y)
        return g if gradT is None else g @ gradT(x, y)

    def pres(x, y):
        X, Y = Tpos(x, y)
        return np.broadcast_to(evaluate(p, {"x": X, "y": Y}), np.shape(x))

    ev = error_norms(d.vf, v, val, grd)
    eq = error_norms(d.qf, q, pres, None, subtract_mean=True)
    return ev["L2"], ev["H1-semi"], eq["L2"]


def _structure_errors(d: Discretization, man: Manufactured):
    w, s, mu = man.u, man.p, man.data.mu
    P = d.tr_w.points
    x, y = P[..., 0], P[..., 1]
    G = w.eval_grad(x, y)
    S = np.broadcast_to(evaluate(s, {"x": x, "y": y}), x.shape)
    n = np.broadcast_to(d.tr_w.normals[:, None, :], G.shape[:-1])
    traction = mu * np.einsum("egij,egj->egi", G, n) - S[..., None] * n
    wh, sh = solve_structure_mixed(d, traction, man.data)
    ew = error_norms(d.ws, wh, lambda x, y: w.eval(x, y), lambda x, y: w.eval_grad(x, y))
    es = error_norms(d.ss, sh, lambda x, y: np.broadcast_to(evaluate(s, {"x": x, "y": y}), np.shape(x)))
    return ew["L2"], ew["H1-semi"], es["L2"]


# ---------------------------------------------------------------------------
# Piola identity under refinement
# ---------------------------------------------------------------------------

PIOLA_DISPLACEMENT = ("0.05*x^2*sin(pi*y)", "0.03*x*sin(pi*y)")


def run_piola_refinement(plan: StudyPlan) -> StudyResult:
    """Projected Piola residual for a smooth displacement of the solid box
    (vanishing on the clamped sides) lifted into the fluid box, under refinement;
    plus the residual of a globally affine transformation."""
    res = StudyResult(plan.kind, plan.name, columns=["level", "h", "residual", "order"])
    wf = VectorField.parse(PIOLA_DISPLACEMENT)
    hs, rs = [], []
    affine = 0.0
    for n in plan.levels:
        d = Discretization(generate_box_pair_mesh(n))
        w = d.ws.interpolate(wf)
        if plan.zero:
            w = np.zeros_like(w)
        rs.append(piola_residual(d.transform(w), d.vf))
        hs.append(1.0 / n)
        M = np.array([[1.1, 0.2], [-0.05, 0.95]])
        ts = transform_from_gradient(d.vf, d.tr_l, M)
        affine = max(affine, piola_residual(ts, d.vf))
    orders = observed_orders(rs, hs)
    for i, (n, h, r) in enumerate(zip(plan.levels, hs, rs)):
        res.rows.append({"level": n, "h": h, "residual": r, "order": orders[i - 1] if i else float("nan")})
    if plan.zero:
        res.checks = [Check("max_residual", max(rs), "<=", 0.0)]
        return res
    res.checks = _make_checks(plan, {"affine_residual": affine, "order": orders[-1]})
    return res


# ---------------------------------------------------------------------------
# Contraction sweep
# ---------------------------------------------------------------------------

def empirical_rate(trace, tol_abs: float) -> float:
    """Last ratio of successive increments whose increments both exceed 1e3 tol_abs
    (below that, round-off pollutes the ratio); 0 if the iteration stopped at once."""
    if len(trace) < 2:
        return 0.0
    floor = 1e3 * tol_abs
    rate = float("nan")
    for prev, cur in zip(trace, trace[1:]):
        if prev.increment_norm > floor and cur.increment_norm > floor:
            rate = cur.increment_norm / prev.increment_norm
    if math.isnan(rate):
        rate = trace[1].increment_norm / trace[0].increment_norm if trace[0].increment_norm > 0 else 0.0
    return rate


ESTIMATE_SCALES = (1e-3, 1e-2)


def estimate_spread(disc: Discretization, data: ProblemData, settings: SolverSettings = SolverSettings(),
                    scales: Sequence[float] = ESTIMATE_SCALES) -> tuple[float, list[float]]:
    """Relative spread max/min - 1 of ||state(eps f, eps g)|| / eps over small ``scales``.

    At small loads the state is linear in the data to leading order, so the
    ratio is constant up to O(eps)."""
    ratios = [state_norm(disc, fsi_fixed_point(disc, data.scaled(e), settings).state) / e for e in scales]
    lo = min(ratios)
    return (max(ratios) / lo - 1.0 if lo > 0 else float("nan")), ratios


def run_contraction_sweep(plan: StudyPlan, disc: Discretization, data: ProblemData,
                          settings: SolverSettings = SolverSettings()) -> StudyResult:
    """Scale the loads by each epsilon; record convergence, rate, iteration count and
    the normalised state size ||state|| / epsilon."""
    res = StudyResult(plan.kind, plan.name, columns=["epsilon", "status", "converged", "iterations", "rate",
                                                     "J_min", "last_increment", "state_norm_per_eps"])
    for eps in sorted(plan.load_scales):
        row = {"epsilon": eps, "state_norm_per_eps": float("nan")}
        try:
            r = fsi_fixed_point(disc, data.scaled(eps), settings)
            row.update(status="CONVERGED", converged=True, iterations=r.iterations,
                       rate=empirical_rate(r.trace, settings.tol_abs), J_min=r.trace[-1].J_min,
                       last_increment=r.trace[-1].increment_norm)
            if eps > 0:
                row["state_norm_per_eps"] = state_norm(disc, r.state) / eps
        except SolverError as exc:
            hist = exc.details.get("history", [])
            row.update(status=exc.code, converged=False, iterations=len(hist),
                       rate=empirical_rate(hist, settings.tol_abs) if hist else float("nan"),
                       J_min=hist[-1].J_min if hist else float("nan"),
                       last_increment=hist[-1].increment_norm if hist else float("nan"))
        res.rows.append(row)
    conv = [r for r in res.rows if r["converged"] and r["epsilon"] > 0]
    values = {}
    if conv:
        rates = [r["rate"] for r in conv]
        values["max_rate"] = max(rates)
        viol = 0.0
        for a, b in zip(rates, rates[1:]):
            if a > 0:
                viol = max(viol, (a - b) / a)
        values["monotone_violation"] = viol
        if len(conv) >= 2 and rates[0] > 0:
            ratio = (rates[1] / rates[0]) / (conv[1]["epsilon"] / conv[0]["epsilon"])
            values["small_end_ratio_factor"] = max(ratio, 1.0 / ratio)
    values["estimate_spread"] = estimate_spread(disc, data, settings)[0]
    res.checks = _make_checks(plan, values)
    zero = [r for r in res.rows if r["epsilon"] == 0.0]
    if zero:
        res.checks.append(Check("zero_load_iterations", float(zero[0]["iterations"]), "<=", 1.0))
    return res


# ---------------------------------------------------------------------------
# Shape derivatives against finite differences
# ---------------------------------------------------------------------------

def random_bump_directions(cfg: GeometryConfig, n: int, seed: int = 0, amplitude: float = 0.3) -> list[tuple]:
    """``n`` bump velocity fields centred on the interface curve, supported away from
    the support disk and the box boundary; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    curve = cfg.interface_curve
    th = np.linspace(0, 2 * np.pi, 721)
    rad = curve.radius(th)
    gap = min(rad.min() - cfg.support_radius, cfg.box_half_width - rad.max())
    out = []
    for k in range(n):
        theta = float(rng.uniform(0, 2 * np.pi))
        r0 = float(curve.radius(theta))
        br = round(float(rng.uniform(0.6, 0.85)) * gap, 6)
        cx, cy = round(r0 * math.cos(theta), 6), round(r0 * math.sin(theta), 6)
        a = rng.normal(size=2)
        a = amplitude * a / np.linalg.norm(a)
        b = f"bump({cx:g},{cy:g},{br:g})"
        out.append((f"V{k + 1}", VectorField.parse([f"{a[0]:.6f}*{b}", f"{a[1]:.6f}*{b}"])))
    return out


def fd_derivative(disc: Discretization, data: ProblemData, specs: Sequence[FunctionalSpec], V, t: float,
                  settings: SolverSettings) -> list[float]:
    """Central differences (j(t) - j(-t)) / 2t of the transported problems, re-solved from zero."""
    vals = []
    for sgn in (1.0, -1.0):
        st = fsi_fixed_point(disc, data, settings, sgn * t, V).state
        vals.append([eval_functional(s, disc, st) for s in specs])
    return [(a - b) / (2 * t) for a, b in zip(vals[0], vals[1])]


def _fit_order(ts, errs) -> float:
    pts = [(math.log(t), math.log(e)) for t, e in zip(ts, errs) if e > 0 and math.isfinite(e)]
    if len(pts) < 3:
        return float("nan")
    x, y = np.array(pts).T
    return float(np.polyfit(x, y, 1)[0])


ZERO_DIRECTION = "zero direction: no convergence order"


def run_shape_fd(plan: StudyPlan, disc: Discretization, data: ProblemData, specs: Sequence[FunctionalSpec],
                 directions: Sequence[tuple], settings: SolverSettings = SolverSettings(),
                 fd_settings: SolverSettings | None = None, with_fd: bool = True) -> list[ShapeGradientReport]:
    """One report per (functional, direction): direct and adjoint derivatives and the FD sequence."""
    fd_settings = fd_settings or SolverSettings(tol_abs=1e-14, tol_rel=1e-14, max_iter=settings.max_iter,
                                                theta=settings.theta, j_min=settings.j_min)
    base = fsi_fixed_point(disc, data, fd_settings).state
    lin = Linearization(disc, data, base)
    values = [eval_functional(s, disc, base) for s in specs]
    adjoints: dict[int, object] = {}
    for i, s in enumerate(specs):
        try:
            adjoints[i] = solve_adjoint(s, lin)
        except SolverError as exc:
            adjoints[i] = exc
    reports = []
    for name, Vf in directions:
        reps = [ShapeGradientReport(name, s.name, value=values[i]) for i, s in enumerate(specs)]
        reports.extend(reps)
        if not check_compact_support(Vf, disc.mesh, 1e-12):
            for r in reps:
                r.status, r.message = "INVALID_DIRECTION", "velocity does not vanish near the fixed boundaries"
            continue
        if Vf.is_zero():
            for r in reps:
                r.message = ZERO_DIRECTION
        V = disc.shape_velocity(Vf)
        md = solve_material_derivatives(lin, V)
        for i, (s, r) in enumerate(zip(specs, reps)):
            r.derivative_direct = shape_derivative_direct(s, lin, md, V)
            adj = adjoints[i]
            if isinstance(adj, SolverError):
                r.status, r.message = "ADJOINT_UNAVAILABLE", str(adj.args[0])
            else:
                r.derivative_adjoint = shape_derivative_adjoint(s, lin, adj, V)
                scale = max(abs(r.derivative_direct), abs(r.derivative_adjoint))
                r.direct_adjoint_gap = abs(r.derivative_direct - r.derivative_adjoint) / scale if scale else 0.0
        if not with_fd:
            continue
        if Vf.is_zero():
            for r in reps:
                r.fd_steps = list(plan.fd_steps)
                r.fd_values = [0.0] * len(plan.fd_steps)
                r.fd_errors = [0.0] * len(plan.fd_steps)
                r.fd_reference = 0.0
            continue
        fds = []
        for t in plan.fd_steps:
            try:
                fds.append(fd_derivative(disc, data, specs, V, t, fd_settings))
            except SolverError:
                fds.append([float("nan")] * len(specs))
        for i, r in enumerate(reps):
            r.fd_steps = list(plan.fd_steps)
            r.fd_values = [f[i] for f in fds]
            r.fd_errors = [abs(r.derivative_direct - f) for f in r.fd_values]
            valid = [(t, e) for t, e in zip(r.fd_steps, r.fd_errors) if math.isfinite(e)]
            if len(valid) < 3:
                r.status = "FD_INVALID"
                continue
            a, b = r.fd_values[-2], r.fd_values[-1]
            r.fd_reference = (4 * b - a) / 3
            r.observed_order = _fit_order(*zip(*valid))
    return reports


def shape_fd_result(plan: StudyPlan, reports: Sequence[ShapeGradientReport], zero_values: Sequence[float] = (),
                    linearity_gaps: Sequence[float] = ()) -> StudyResult:
    """Table and checks for a set of shape-derivative reports."""
    res = StudyResult(plan.kind, plan.name)
    res.columns = ["direction", "functional", "status", "value", "derivative_direct", "derivative_adjoint",
                   "direct_adjoint_gap", "fd_reference", "observed_order", "floor_gap"]
    steps = list(plan.fd_steps)
    res.columns += [f"fd_t{k}" for k in range(len(steps))] + [f"err_t{k}" for k in range(len(steps))]
    gaps, orders_lo, orders_hi = [], [], []
    for r in sorted(reports, key=lambda r: (r.functional, r.direction)):
        row = r.as_row()
        floor = max(r.fd_errors) / abs(r.value) if (r.fd_errors and r.value) else float("nan")
        row["floor_gap"] = floor
        if r.message == ZERO_DIRECTION:
            row["observed_order"] = "n/a"
        for k in range(len(steps)):
            row[f"fd_t{k}"] = r.fd_values[k] if k < len(r.fd_values) else float("nan")
            row[f"err_t{k}"] = r.fd_errors[k] if k < len(r.fd_errors) else float("nan")
        res.rows.append(row)
        if r.status != "OK" or r.derivative_direct == 0.0:
            continue
        gaps.append(r.direct_adjoint_gap)
        # at the tolerance floor the order is meaningless; the gap itself is then checked
        if math.isfinite(floor) and floor <= 1e-8:
            continue
        orders_lo.append(r.observed_order)
        orders_hi.append(r.observed_order)
    values = {}
    if gaps:
        values["direct_adjoint_gap"] = max(gaps)
    if orders_lo:
        values["fd_order_min"] = min(orders_lo)
        values["fd_order_max"] = max(orders_hi)
    if zero_values:
        values["zero_direction"] = max(abs(z) for z in zero_values)
    if linearity_gaps:
        values["linearity_gap"] = max(linearity_gaps)
    res.checks = _make_checks(plan, values)
    bad = [r for r in reports if r.status not in ("OK", "INVALID_DIRECTION")]
    if bad:
        res.checks.append(Check("failed_reports", float(len(bad)), "<=", 0.0))
    return res


def linearity_gap(spec: FunctionalSpec, lin: Linearization, disc: Discretization, V1: VectorField,
                  V2: VectorField, a: float = 2.5) -> float:
    """Relative gap | J'[a V1 + V2] - a J'[V1] - J'[V2] | for both derivative routes (max)."""
    from .expr import add as eadd

    comb = VectorField([eadd(mul(Const(a), c1), c2) for c1, c2 in zip(V1.components, V2.components)])
    adj = solve_adjoint(spec, lin)
    gaps = []
    vals = {}
    for key, Vf in (("1", V1), ("2", V2), ("c", comb)):
        V = disc.shape_velocity(Vf)
        md = solve_material_derivatives(lin, V)
        vals[key] = (shape_derivative_direct(spec, lin, md, V), shape_derivative_adjoint(spec, lin, adj, V))
    for k in range(2):
        lhs, rhs = vals["c"][k], a * vals["1"][k] + vals["2"][k]
        gaps.append(abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    return max(gaps)


def run_shape_study(plan: StudyPlan, disc: Discretization, data: ProblemData, specs: Sequence[FunctionalSpec],
                    directions: Sequence[tuple] | None, cfg: GeometryConfig | None = None,
                    settings: SolverSettings = SolverSettings(), with_fd: bool = True) -> StudyResult:
    """Full shape-derivative verification: FD reports, zero direction, linearity."""
    if not directions:
        directions = random_bump_directions(cfg or GeometryConfig(), plan.n_directions, plan.seed)
    dirs = list(directions) + [("ZERO", VectorField.zero())]
    reports = run_shape_fd(plan, disc, data, specs, dirs, settings, with_fd=with_fd)
    zero_vals = [v for r in reports if r.direction == "ZERO" for v in (r.derivative_direct, r.derivative_adjoint)]
    valid = [(n, V) for n, V in directions if check_compact_support(V, disc.mesh, 1e-12)]
    lin_gaps = []
    if len(valid) >= 2:
        lin = Linearization(disc, data, fsi_fixed_point(disc, data, settings).state)
        lin_gaps = [linearity_gap(s, lin, disc, valid[0][1], valid[1][1]) for s in specs]
    res = shape_fd_result(plan, reports, zero_vals, lin_gaps)
    res.reports = reports  # type: ignore[attr-defined]
    return res


# ---------------------------------------------------------------------------
# Material derivatives against moved-mesh re-solves
# ---------------------------------------------------------------------------

def richardson_forward(values: Sequence[np.ndarray]) -> np.ndarray:
    """Two-level Richardson extrapolation of forward differences at steps t, t/2, t/4."""
    a, b, c = values
    r1, r2 = 2 * b - a, 2 * c - b
    return (4 * r2 - r1) / 3


def run_material_fd(plan: StudyPlan, disc: Discretization, data: ProblemData, Vf: VectorField,
                    settings: SolverSettings | None = None) -> StudyResult:
    """Compare material derivatives with (state on moved mesh - state) / t, extrapolated.

    The moved mesh re-uses the reference lifting and pressure gauge; the state
    on it, read on the reference dofs, is the pull-back by the node motion, whose
    velocity is the piecewise-linear interpolant of V -- so that interpolant is
    the direction used for the linearised solve."""
    settings = settings or SolverSettings(tol_abs=1e-14, tol_rel=1e-14)
    res = StudyResult(plan.kind, plan.name, columns=["step", "v_rel_H1", "w_rel_H1"])
    base = fsi_fixed_point(disc, data, settings).state
    lin = Linearization(disc, data, base)
    Vh = disc.shape_velocity(Vf, interpolated=True)
    md = solve_material_derivatives(lin, Vh)
    md2 = solve_material_derivatives(lin, Vh.scaled(2.0))
    nv = compute_norm(disc.vf, md.v, "H1")
    nw = compute_norm(disc.ws, md.w, "H1")
    steps = plan.fd_steps[:3]
    dv, dw = [], []
    for t in steps:
        moved = Discretization(deform_mesh(disc.mesh, Vf.scaled(t)), lifting=disc.lifting, gauge=disc.gauge)
        st = fsi_fixed_point(moved, data, settings).state
        dv.append((st.v - base.v) / t)
        dw.append((st.w - base.w) / t)
        res.rows.append({"step": t, "v_rel_H1": compute_norm(disc.vf, dv[-1] - md.v, "H1") / nv,
                         "w_rel_H1": compute_norm(disc.ws, dw[-1] - md.w, "H1") / nw})
    ev = compute_norm(disc.vf, richardson_forward(dv) - md.v, "H1") / nv
    ew = compute_norm(disc.ws, richardson_forward(dw) - md.w, "H1") / nw
    res.rows.append({"step": "extrapolated", "v_rel_H1": ev, "w_rel_H1": ew})
    lin_gap = max(np.abs(md2.v - 2 * md.v).max() / np.abs(md.v).max(),
                  np.abs(md2.w - 2 * md.w).max() / np.abs(md.w).max())
    res.checks = _make_checks(plan, {"v_rel_H1": ev, "w_rel_H1": ew, "linearity_gap": lin_gap})
    return res
