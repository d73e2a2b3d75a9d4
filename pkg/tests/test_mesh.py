import math

import numpy as np
import pytest

from fsishape.errors import MeshError, ParseError
from fsishape.expr import VectorField
from fsishape.mesh import (FLUID, GAMMA0, GAMMA_OMEGA, OUTER, SOLID, GeometryConfig, Mesh, boundary_normal,
                           boundary_normals, circle, deform_mesh, ellipse, generate_annular_mesh,
                           generate_box_pair_mesh, load_mesh, mesh_report, parse_curve, parse_mesh, save_mesh,
                           star, validate_mesh)

TOY = """fsimesh 1
nodes 4
0 0
1 0
1 1
0 1
triangles 2
0 1 2 fluid
0 2 3 fluid
bedges 4
0 1 outer
1 2 outer
2 3 outer
3 0 outer
"""


def _closed_loop(mesh, tag):
    edges = mesh.boundary_edges[mesh.boundary_tags == tag]
    deg = np.bincount(edges.ravel(), minlength=mesh.n_nodes)
    return np.all(deg[np.unique(edges)] == 2)


def test_generated_mesh_has_both_regions_and_closed_interface():
    cfg = GeometryConfig(1.5, 0.2, circle(0.5), 0.4)
    m = generate_annular_mesh(cfg)
    assert set(np.unique(m.regions)) == {SOLID, FLUID}
    assert _closed_loop(m, GAMMA0) and _closed_loop(m, GAMMA_OMEGA) and _closed_loop(m, OUTER)
    validate_mesh(m)


def test_halving_edge_length_roughly_quadruples_triangles():
    n1 = generate_annular_mesh(GeometryConfig(1.5, 0.2, circle(0.5), 0.3)).n_triangles
    n2 = generate_annular_mesh(GeometryConfig(1.5, 0.2, circle(0.5), 0.15)).n_triangles
    assert 3.0 <= n2 / n1 <= 5.0


def test_curve_leaving_box_is_a_nesting_violation():
    with pytest.raises(MeshError) as ei:
        generate_annular_mesh(GeometryConfig(1.5, 0.2, circle(1.6), 0.3))
    assert ei.value.code == "NESTING_VIOLATION"
    assert ei.value.details["constraint"] == "gamma0_in_box"


def test_support_disk_outside_curve_is_a_nesting_violation():
    with pytest.raises(MeshError) as ei:
        GeometryConfig(1.5, 0.6, circle(0.5), 0.3).check()
    assert ei.value.details["constraint"] == "omega_in_gamma0"


@pytest.mark.parametrize("curve", [ellipse(0.6, 0.45), star(0.55, 0.08, 5)])
def test_other_builtin_curves_mesh_cleanly(curve):
    m = generate_annular_mesh(GeometryConfig(1.5, 0.2, curve, 0.2))
    validate_mesh(m)
    g0 = np.unique(m.boundary_edges[m.boundary_tags == GAMMA0])
    x, y = m.nodes[g0].T
    r = curve.radius(np.arctan2(y, x))
    assert np.max(np.abs(np.hypot(x, y) - r)) <= 0.2 / 100


def test_interface_nodes_lie_on_the_curve(coarse_mesh, coarse_cfg):
    p = coarse_mesh.nodes[coarse_mesh.interface_nodes]
    assert np.max(np.abs(np.hypot(*p.T) - 0.5)) <= coarse_cfg.target_edge_length / 100


def test_parse_curve_roundtrip():
    assert parse_curve("circle(0.5)").radius(np.array([0.3]))[0] == pytest.approx(0.5)
    with pytest.raises((ValueError, ParseError, MeshError)):
        parse_curve("square(1)")


def test_load_toy_mesh(tmp_path):
    p = tmp_path / "toy.fsimesh"
    p.write_text(TOY)
    m = load_mesh(p)
    assert m.n_triangles == 2 and m.n_nodes == 4


def test_negative_orientation_is_rejected():
    bad = TOY.replace("0 1 2 fluid", "0 2 1 fluid")
    with pytest.raises(MeshError) as ei:
        parse_mesh(bad)
    assert ei.value.code == "INVALID_MESH" and ei.value.details["invariant"] == "orientation"


def test_truncated_file_is_a_parse_error():
    with pytest.raises(ParseError) as ei:
        parse_mesh("\n".join(TOY.splitlines()[:8]))
    assert ei.value.code == "PARSE_ERROR"


def test_save_load_roundtrip(tmp_path, coarse_mesh):
    p = tmp_path / "m.fsimesh"
    save_mesh(coarse_mesh, p)
    assert load_mesh(p) == coarse_mesh


def test_zero_deformation_is_identity(coarse_mesh):
    assert deform_mesh(coarse_mesh, VectorField.zero()) == coarse_mesh


def test_compactly_supported_deformation_keeps_fixed_boundaries(coarse_mesh):
    V = VectorField.parse(["0.05*bump(0.9,0.0,0.3)", "0.03*bump(0.9,0.0,0.3)"])
    moved = deform_mesh(coarse_mesh, V)
    fixed = np.unique(coarse_mesh.boundary_edges[coarse_mesh.boundary_tags != GAMMA0])
    assert np.array_equal(moved.nodes[fixed], coarse_mesh.nodes[fixed])
    assert not np.array_equal(moved.nodes, coarse_mesh.nodes)


def test_flipping_a_triangle_is_tangled():
    m = parse_mesh(TOY)
    # move node 1 across the diagonal 0-2
    with pytest.raises(MeshError) as ei:
        deform_mesh(m, lambda p: np.where(np.arange(4)[:, None] == 1, [-0.8, 0.8], 0.0))
    assert ei.value.code == "TANGLED_MESH"


def test_normal_of_bottom_outer_edge():
    m = parse_mesh(TOY)
    assert np.allclose(boundary_normal(m, 0), [0.0, -1.0])


def test_interface_normals_point_into_fluid(coarse_mesh):
    ids = np.flatnonzero(coarse_mesh.boundary_tags == GAMMA0)
    n = boundary_normals(coarse_mesh, ids)
    mid = coarse_mesh.nodes[coarse_mesh.boundary_edges[ids]].mean(axis=1)
    radial = mid / np.linalg.norm(mid, axis=1)[:, None]
    assert np.all(np.sum(n * radial, axis=1) > 0.95)
    assert np.max(np.abs(np.linalg.norm(boundary_normals(coarse_mesh), axis=1) - 1.0)) <= 1e-14


def test_box_pair_mesh_is_valid():
    m = generate_box_pair_mesh(4)
    validate_mesh(m)
    assert m.region_area(SOLID) == pytest.approx(1.0) and m.region_area(FLUID) == pytest.approx(1.0)


def test_mesh_report_counts(coarse_mesh):
    r = mesh_report(coarse_mesh)
    assert r["triangles"] == r["solid_triangles"] + r["fluid_triangles"]
    assert r["min_angle_deg"] >= 20.0
    assert r["solid_area"] + r["fluid_area"] == pytest.approx(9.0 - math.pi * 0.04, rel=1e-2)


def test_mesh_is_immutable(coarse_mesh):
    with pytest.raises(ValueError):
        coarse_mesh.nodes[0, 0] = 1.0
