"""Output writers: legacy ASCII VTK for fields, RFC-4180 CSV for tables.

Floats are written with 17 significant digits so that identical runs produce
byte-identical files.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .mesh import FLUID, SOLID, Mesh

VTK_QUADRATIC_TRIANGLE = 22


def format_value(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return "%.17g" % x
    return "" if x is None else str(x)


def write_csv(path: str | Path, rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> Path:
    """Write ``rows`` (dicts) with a header row; columns default to the first row's keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="ascii") as fh:
        wr = csv.writer(fh, lineterminator="\r\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([format_value(r.get(c)) for c in columns])
    return path


def trace_rows(trace) -> list[dict]:
    return [{"iter": r.iter, "increment_norm": r.increment_norm, "rate": r.rate, "J_min": r.J_min} for r in trace]


def _cell_average(space, coeffs) -> np.ndarray:
    from .fem import field_jets

    vals = field_jets(space, coeffs)[..., 0]
    w = space.quad.weights
    return (vals * w).sum(axis=1) / w.sum(axis=1)


def write_vtk(path: str | Path, mesh: Mesh, disc=None, state=None, title: str = "fsishape fields") -> Path:
    """Quadratic-triangle VTK file: point data (velocity, displacement) on the P2 nodes,
    cell data (region, cell-averaged pressure and multiplier, J, |G|, |F|)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = mesh.p2_nodes
    tri = mesh.triangle_p2
    n_pts, n_cells = len(pts), len(tri)
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {n_pts} double"]
    lines += [f"{format_value(x)} {format_value(y)} 0" for x, y in pts]
    lines.append(f"CELLS {n_cells} {7 * n_cells}")
    lines += ["6 " + " ".join(str(int(i)) for i in row) for row in tri]
    lines.append(f"CELL_TYPES {n_cells}")
    lines += [str(VTK_QUADRATIC_TRIANGLE)] * n_cells
    lines.append(f"CELL_DATA {n_cells}")
    lines += ["SCALARS region int 1", "LOOKUP_TABLE default"] + [str(int(r)) for r in mesh.regions]
    if disc is not None and state is not None:
        cell = {"pressure": np.zeros(n_cells), "multiplier": np.zeros(n_cells), "J": np.ones(n_cells),
                "G_norm": np.full(n_cells, math.sqrt(2.0)), "F_norm": np.full(n_cells, math.sqrt(2.0))}
        cell["pressure"][disc.qf.cells] = _cell_average(disc.qf, state.q)
        cell["multiplier"][disc.ss.cells] = _cell_average(disc.ss, state.s)
        ts = state.ts
        w = disc.vf.quad.weights
        avg = lambda a: (a * w).sum(axis=1) / w.sum(axis=1)
        cell["J"][disc.vf.cells] = avg(ts.fluid.J)
        cell["G_norm"][disc.vf.cells] = avg(np.linalg.norm(ts.fluid.G, axis=(-2, -1)))
        cell["F_norm"][disc.vf.cells] = avg(np.linalg.norm(ts.fluid.F, axis=(-2, -1)))
        for name, arr in cell.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"] + [format_value(a) for a in arr]
        lines.append(f"POINT_DATA {n_pts}")
        for name, space, coeffs in (("velocity", disc.vf, state.v), ("displacement", disc.ws, state.w),
                                    ("lifted_displacement", disc.lifting.space, state.ell)):
            arr = np.zeros((n_pts, 2))
            arr[space.node_ids] = np.asarray(coeffs).reshape(-1, 2)
            lines.append(f"VECTORS {name} double")
            lines += [f"{format_value(a)} {format_value(b)} 0" for a, b in arr]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def write_text(path: str | Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
