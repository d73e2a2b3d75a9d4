import csv
import hashlib
import io

import pytest

from fsishape.cli import main

from conftest import CONFIGS


def rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text(), newline="")))


def write(tmp_path, text, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_mesh_writes_file_and_report(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["mesh", "--config", str(CONFIGS / "small_load.yaml"), "--out", str(out)]) == 0
    assert (out / "mesh.fsimesh").exists() and (out / "manifest.txt").exists()
    report = (out / "mesh_report.txt").read_text()
    assert "nodes:" in report and "triangles:" in report


def test_mesh_nesting_violation(tmp_path, capsys):
    cfg = write(tmp_path, 'geometry:\n  interface_curve: "circle(1.6)"\n  box_half_width: 1.5\n')
    assert main(["mesh", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "NESTING_VIOLATION" in err and "gamma0_in_box" in err


def test_mesh_check_only_writes_nothing(tmp_path):
    out = tmp_path / "o"
    assert main(["mesh", "--config", str(CONFIGS / "small_load.yaml"), "--out", str(out), "--check-only"]) == 0
    assert not out.exists()


def test_invalid_config_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, "physics:\n  nu: -1\n")
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "physics.nu" in capsys.readouterr().err


def test_solve_zero_load(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["solve", "--config", str(CONFIGS / "zero_load.yaml"), "--out", str(out)]) == 0
    assert len(rows(out / "trace.csv")) == 1
    assert "functional ENERGY = 0\n" in capsys.readouterr().out
    assert (out / "state.vtk").exists()


def test_solve_small_load_reference(tmp_path):
    out = tmp_path / "o"
    src = CONFIGS / "small_load.yaml"
    before = hashlib.sha256(src.read_bytes()).hexdigest()
    assert main(["solve", "--config", str(src), "--out", str(out)]) == 0
    tr = rows(out / "trace.csv")
    assert len(tr) >= 2 and float(tr[-1]["increment_norm"]) <= 1e-10
    assert hashlib.sha256(src.read_bytes()).hexdigest() == before
    assert f"config_sha256: {before}" in (out / "manifest.txt").read_text()


def test_solve_oversized_load(tmp_path, capsys):
    out = tmp_path / "o"
    code = main(["solve", "--config", str(CONFIGS / "oversized_load.yaml"), "--out", str(out)])
    assert code in (3, 4)
    assert (out / "trace.csv").exists()
    assert "last residual" in capsys.readouterr().out


def test_solve_max_iter(tmp_path, capsys):
    text = (CONFIGS / "small_load.yaml").read_text().replace("max_iter: 100", "max_iter: 2")
    cfg = write(tmp_path, text)
    out = tmp_path / "o"
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == 3
    assert len(rows(out / "trace.csv")) == 2


DERIVE = """geometry:
  target_edge_length: 0.25
physics:
  f: ["0.3*bump(0.9,0.3,0.45)", "-0.3*bump(-0.8,0.6,0.5)"]
  g: ["0.3*bump(0.3,0.2,0.15)", "0"]
functionals:
  - builtin: ENERGY
directions:
{dirs}
"""


def test_derive_with_fd(tmp_path):
    dirs = ('  - name: V1\n    field: ["0.3*bump(0.5,0.0,0.18)", "0.1*bump(0.5,0.0,0.18)"]\n'
            '  - name: V2\n    field: ["-0.1*bump(0.0,0.5,0.2)", "0.25*bump(0.0,0.5,0.2)"]')
    cfg = write(tmp_path, DERIVE.format(dirs=dirs))
    out = tmp_path / "o"
    assert main(["derive", "--config", str(cfg), "--out", str(out), "--with-fd"]) == 0
    r = rows(out / "derivatives.csv")
    assert len(r) == 2
    for row in r:
        assert row["status"] == "OK"
        assert 1.8 <= float(row["observed_order"]) <= 2.2


def test_derive_zero_and_invalid_directions(tmp_path):
    dirs = ('  - name: ZERO\n    field: ["0", "0"]\n'
            '  - name: BAD\n    field: ["bump(1.5,0,0.3)", "0"]')
    cfg = write(tmp_path, DERIVE.format(dirs=dirs))
    out = tmp_path / "o"
    assert main(["derive", "--config", str(cfg), "--out", str(out)]) == 0
    by = {r["direction"]: r for r in rows(out / "derivatives.csv")}
    assert float(by["ZERO"]["derivative_direct"]) == 0.0 and float(by["ZERO"]["derivative_adjoint"]) == 0.0
    assert by["BAD"]["status"] == "INVALID_DIRECTION"


def test_validate_impossible_threshold(tmp_path, capsys):
    cfg = write(tmp_path, "studies:\n  - kind: MMS_STRUCTURE\n    levels: [2, 4, 8]\n"
                          "    thresholds: {w_H1_order: 10}\n")
    out = tmp_path / "o"
    assert main(["validate", "--config", str(cfg), "--out", str(out)]) == 5
    assert (out / "summary.txt").read_text().startswith("FAIL mms_structure")


def test_validate_empty_plan(tmp_path):
    cfg = write(tmp_path, "studies: []\n")
    out = tmp_path / "o"
    assert main(["validate", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "summary.txt").read_text() == ""


def test_seed_flag_recorded(tmp_path):
    cfg = write(tmp_path, "studies: []\n")
    out = tmp_path / "o"
    assert main(["validate", "--config", str(cfg), "--out", str(out), "--seed", "42"]) == 0
    assert "seed: 42" in (out / "manifest.txt").read_text()


def test_help_documents_exit_codes(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    assert "NONINVERTIBLE_TRANSFORM" in capsys.readouterr().out
