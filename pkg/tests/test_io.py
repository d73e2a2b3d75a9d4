import csv
import io as pyio

import numpy as np

from fsishape.fsi import fsi_fixed_point
from fsishape.io import format_value, trace_rows, write_csv, write_vtk


def test_format_value():
    assert format_value(0.1) == "0.10000000000000001"
    assert format_value(float("nan")) == "nan"
    assert format_value(float("-inf")) == "-inf"
    assert format_value(True) == "true"
    assert format_value(np.int64(3)) == "3"
    assert format_value(None) == ""
    assert float(format_value(1 / 3)) == 1 / 3


def test_csv_is_rfc4180(tmp_path):
    p = write_csv(tmp_path / "t.csv", [{"a": 1.5, "b": "x,y"}, {"a": 2, "b": 'say "hi"'}], ["a", "b"])
    raw = p.read_bytes()
    assert raw.count(b"\r\n") == 3 and raw.endswith(b"\r\n")
    rows = list(csv.reader(pyio.StringIO(raw.decode(), newline="")))
    assert rows == [["a", "b"], ["1.5", "x,y"], ["2", 'say "hi"']]


def test_empty_csv_has_header(tmp_path):
    p = write_csv(tmp_path / "e.csv", [], ["iter", "rate"])
    assert p.read_bytes() == b"iter,rate\r\n"


def test_vtk_structure(tmp_path, disc, small_data):
    r = fsi_fixed_point(disc, small_data)
    p = write_vtk(tmp_path / "s.vtk", disc.mesh, disc, r.state)
    lines = p.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0" and lines[2] == "ASCII"
    n_pts = disc.mesh.n_p2_nodes
    assert f"POINTS {n_pts} double" in lines
    assert f"CELL_TYPES {disc.mesh.n_triangles}" in lines
    for name in ("velocity", "displacement", "lifted_displacement"):
        assert f"VECTORS {name} double" in lines
    for name in ("pressure", "multiplier", "J", "region"):
        assert any(l.startswith(f"SCALARS {name} ") for l in lines)
    i = lines.index("VECTORS velocity double")
    vel = np.array([[float(t) for t in l.split()] for l in lines[i + 1:i + 1 + n_pts]])
    assert vel.shape == (n_pts, 3) and np.abs(vel).max() > 0


def test_trace_rows(disc, small_data):
    r = fsi_fixed_point(disc, small_data)
    rows = trace_rows(r.trace)
    assert [x["iter"] for x in rows] == list(range(1, r.iterations + 1))
