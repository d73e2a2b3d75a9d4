import math

import numpy as np
import pytest

from fsishape import validation
from fsishape.errors import SolverError
from fsishape.expr import VectorField
from fsishape.fsi import IterationRecord, ProblemData
from fsishape.sensitivity import FunctionalSpec
from fsishape.validation import (Check, StudyPlan, empirical_rate, observed_orders, random_bump_directions,
                                 richardson_forward, run_contraction_sweep, run_mms, run_shape_fd, shape_fd_result)

from conftest import BASE_F, BASE_G

V1 = VectorField.parse(["0.3*bump(0.5,0.0,0.18)", "0.1*bump(0.5,0.0,0.18)"])


def test_observed_orders():
    hs = [0.1, 0.05, 0.025]
    assert observed_orders([c * h ** 2 for c, h in zip([3, 3, 3], hs)], hs) == pytest.approx([2.0, 2.0])


def test_plan_validation():
    with pytest.raises(ValueError):
        StudyPlan("NOPE")
    with pytest.raises(ValueError):
        StudyPlan("MMS_STOKES", levels=(8, 16))
    with pytest.raises(ValueError):
        StudyPlan("SHAPE_FD", fd_steps=(1e-3, 1e-2))
    with pytest.raises(ValueError):
        StudyPlan("SHAPE_FD", thresholds={"bogus": 1.0})
    assert StudyPlan("mms_stokes", variant="transform").name == "mms_stokes_transform"


def test_check_semantics():
    assert Check("a", 2.0, ">=", 1.9).passed
    assert not Check("a", float("nan"), "<=", 1.0).passed
    assert not Check("a", 1.0, "<", 1.0).passed


@pytest.mark.parametrize("kind", ["MMS_STOKES", "MMS_STRUCTURE"])
def test_zero_manufactured_solution_gives_zero_errors(kind):
    res = run_mms(StudyPlan(kind, levels=(2, 4, 8), zero=True))
    for row in res.rows:
        for k, v in row.items():
            if k.endswith(("_L2", "_H1")):
                assert v == 0.0


def test_stokes_velocity_h1_order():
    res = run_mms(StudyPlan("MMS_STOKES", levels=(4, 8, 16)))
    assert res.check("v_H1_order").value >= 1.9


def test_impossible_threshold_fails():
    res = run_mms(StudyPlan("MMS_STRUCTURE", levels=(2, 4, 8), thresholds={"w_H1_order": 10.0}))
    assert not res.passed and not res.check("w_H1_order").passed


def test_empirical_rate_ignores_roundoff_tail():
    tr = [IterationRecord(1, 1e-2, math.nan, 1), IterationRecord(2, 1e-4, 1e-2, 1),
          IterationRecord(3, 1e-6, 1e-2, 1), IterationRecord(4, 5e-12, 5e-6, 1)]
    assert empirical_rate(tr, 1e-11) == pytest.approx(1e-2)
    assert empirical_rate(tr[:1], 1e-11) == 0.0


def test_contraction_sweep(disc):
    plan = StudyPlan("CONTRACTION_SWEEP", load_scales=(0.0, 0.1, 0.3, 30.0))
    res = run_contraction_sweep(plan, disc, ProblemData.parse(BASE_F, BASE_G))
    rows = {r["epsilon"]: r for r in res.rows}
    assert rows[0.0]["iterations"] == 1
    assert rows[30.0]["status"] in ("MAX_ITER_EXCEEDED", "NONINVERTIBLE_TRANSFORM")
    assert res.check("small_end_ratio_factor").passed
    assert res.check("estimate_spread").value <= 0.05
    assert res.passed


def test_random_directions_are_deterministic_and_admissible(coarse_cfg, coarse_mesh):
    from fsishape.expr import check_compact_support

    a = random_bump_directions(coarse_cfg, 3, seed=5)
    b = random_bump_directions(coarse_cfg, 3, seed=5)
    assert [str(v) for _, v in a] == [str(v) for _, v in b]
    assert all(check_compact_support(v, coarse_mesh) for _, v in a)
    assert [str(v) for _, v in random_bump_directions(coarse_cfg, 3, seed=6)] != [str(v) for _, v in a]


def test_richardson_removes_linear_and_quadratic_terms():
    exact, c1, c2 = 3.0, 0.7, -2.0
    vals = [np.array([exact + c1 * t + c2 * t * t]) for t in (0.04, 0.02, 0.01)]
    assert richardson_forward(vals)[0] == pytest.approx(exact, abs=1e-12)


def test_shape_fd_reports(disc, small_data):
    plan = StudyPlan("SHAPE_FD", fd_steps=(1e-2, 5e-3, 2.5e-3, 1.25e-3))
    dirs = [("V1", V1), ("MINUS", V1.scaled(-1.0)), ("ZERO", VectorField.zero()),
            ("BAD", VectorField.parse(["bump(1.5,0,0.3)", "0"]))]
    reps = run_shape_fd(plan, disc, small_data, [FunctionalSpec.energy()], dirs)
    by = {r.direction: r for r in reps}
    assert 1.8 <= by["V1"].observed_order <= 2.2
    assert abs(by["V1"].derivative_direct + by["MINUS"].derivative_direct) <= 1e-10 * abs(by["V1"].derivative_direct)
    z = by["ZERO"]
    assert z.derivative_direct == 0.0 and z.derivative_adjoint == 0.0 and z.fd_reference == 0.0
    assert by["BAD"].status == "INVALID_DIRECTION"
    res = shape_fd_result(plan, reps)
    zrow = next(r for r in res.rows if r["direction"] == "ZERO")
    assert zrow["observed_order"] == "n/a"
    assert res.passed


def test_adjoint_failure_is_reported_per_row(disc, small_data, monkeypatch):
    def broken(spec, lin):
        raise SolverError("adjoint system could not be solved", code="ADJOINT_UNAVAILABLE")

    monkeypatch.setattr(validation, "solve_adjoint", broken)
    plan = StudyPlan("SHAPE_FD")
    reps = run_shape_fd(plan, disc, small_data, [FunctionalSpec.energy()],
                        [("V1", V1), ("V2", V1.scaled(0.5))], with_fd=False)
    assert [r.status for r in reps] == ["ADJOINT_UNAVAILABLE"] * 2
    assert all(math.isfinite(r.derivative_direct) and r.derivative_direct != 0 for r in reps)
