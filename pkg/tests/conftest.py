"""Shared fixtures: small annular meshes and a converged small-load state."""
from __future__ import annotations

from pathlib import Path

import pytest

from fsishape.fsi import Discretization, ProblemData, SolverSettings, fsi_fixed_point
from fsishape.mesh import GeometryConfig, circle, generate_annular_mesh

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"

BASE_F = ["bump(0.9,0.3,0.45)", "-bump(-0.8,0.6,0.5)"]
BASE_G = ["bump(0.3,0.2,0.15)", "0"]
TIGHT = SolverSettings(tol_abs=1e-14, tol_rel=1e-14)


@pytest.fixture(scope="session")
def coarse_cfg() -> GeometryConfig:
    return GeometryConfig(box_half_width=1.5, support_radius=0.2, interface_curve=circle(0.5),
                          target_edge_length=0.25)


@pytest.fixture(scope="session")
def coarse_mesh(coarse_cfg):
    return generate_annular_mesh(coarse_cfg)


@pytest.fixture(scope="session")
def disc(coarse_mesh) -> Discretization:
    return Discretization(coarse_mesh)


@pytest.fixture(scope="session")
def small_data() -> ProblemData:
    return ProblemData.parse(BASE_F, BASE_G).scaled(0.3)


@pytest.fixture(scope="session")
def small_state(disc, small_data):
    return fsi_fixed_point(disc, small_data, TIGHT).state
