"""Run configuration: one YAML file, schema-validated before any computation.

Unknown keys are rejected at every level.  Expressions are quoted strings in
the grammar of :mod:`fsishape.expr`; vector fields are two-element lists.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError, FsiError
from .expr import VectorField, parse_field


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _check_vector(v):
    if len(v) != 2:
        raise ValueError("a vector field needs exactly two component expressions")
    try:
        VectorField.parse(list(v))
    except FsiError as exc:
        raise ValueError(str(exc)) from None
    return v


class GeometrySection(_Strict):
    box_half_width: float = Field(1.5, gt=0)
    support_radius: float = Field(0.2, gt=0)
    interface_curve: str = "circle(0.5)"
    target_edge_length: float = Field(0.2, gt=0)
    min_angle: float = Field(20.0, ge=0, lt=60)
    mesh_file: Optional[str] = None

    @field_validator("interface_curve")
    @classmethod
    def _curve(cls, v):
        from .mesh import parse_curve

        try:
            parse_curve(v)
        except (FsiError, ValueError) as exc:
            raise ValueError(str(exc)) from None
        return v


class PhysicsSection(_Strict):
    nu: float = Field(1.0, gt=0)
    mu: float = Field(1.0, gt=0)
    f: tuple[str, str] = ("0", "0")
    g: tuple[str, str] = ("0", "0")

    @field_validator("f", "g")
    @classmethod
    def _vector(cls, v):
        return _check_vector(v)


class SolverSection(_Strict):
    tol_abs: float = Field(1e-11, gt=0)
    tol_rel: float = Field(1e-10, gt=0)
    max_iter: int = Field(100, ge=1)
    theta: float = Field(1.0, gt=0, le=1)
    j_min: float = Field(0.1, ge=0)


class FunctionalSection(_Strict):
    name: str = "ENERGY"
    builtin: Optional[Literal["ENERGY"]] = None
    j_S: Optional[str] = None
    j_F: Optional[str] = None

    @field_validator("j_S", "j_F")
    @classmethod
    def _integrand(cls, v):
        if v is None:
            return v
        from .sensitivity import INTEGRAND_VARIABLES

        try:
            parse_field(v, INTEGRAND_VARIABLES)
        except FsiError as exc:
            raise ValueError(str(exc)) from None
        return v


class DirectionSection(_Strict):
    name: str
    field: tuple[str, str]

    @field_validator("field")
    @classmethod
    def _vector(cls, v):
        return _check_vector(v)


class StudySection(_Strict):
    kind: Literal["MMS_STOKES", "MMS_STRUCTURE", "PIOLA_REFINE", "CONTRACTION_SWEEP", "SHAPE_FD", "MATERIAL_FD"]
    name: Optional[str] = None
    levels: Optional[list[int]] = None
    load_scales: Optional[list[float]] = None
    fd_steps: Optional[list[float]] = None
    n_directions: Optional[int] = Field(None, ge=1)
    variant: Literal["identity", "transform"] = "identity"
    zero: bool = False
    thresholds: dict[str, float] = Field(default_factory=dict)


class RunConfig(_Strict):
    geometry: GeometrySection = GeometrySection()
    physics: PhysicsSection = PhysicsSection()
    solver: SolverSection = SolverSection()
    functionals: list[FunctionalSection] = Field(default_factory=lambda: [FunctionalSection(builtin="ENERGY")])
    directions: list[DirectionSection] = Field(default_factory=list)
    studies: list[StudySection] = Field(default_factory=list)
    seed: int = 0
    output: str = "out"

    # -- conversions ---------------------------------------------------------
    def geometry_config(self):
        from .mesh import GeometryConfig, parse_curve

        g = self.geometry
        return GeometryConfig(box_half_width=g.box_half_width, support_radius=g.support_radius,
                              interface_curve=parse_curve(g.interface_curve),
                              target_edge_length=g.target_edge_length, min_angle=g.min_angle)

    def problem_data(self):
        from .fsi import ProblemData

        p = self.physics
        return ProblemData.parse(list(p.f), list(p.g), p.nu, p.mu)

    def solver_settings(self):
        from .fsi import SolverSettings

        s = self.solver
        return SolverSettings(tol_abs=s.tol_abs, tol_rel=s.tol_rel, max_iter=s.max_iter, theta=s.theta,
                              j_min=s.j_min)

    def functional_specs(self):
        from .sensitivity import FunctionalSpec

        out = []
        for f in self.functionals:
            if f.builtin is not None:
                out.append(FunctionalSpec.builtin(f.builtin))
            else:
                out.append(FunctionalSpec.from_expressions(f.j_S, f.j_F, f.name))
        return out

    def direction_fields(self):
        return [(d.name, VectorField.parse(list(d.field))) for d in self.directions]

    def study_plans(self):
        from .validation import StudyPlan

        plans = []
        for s in self.studies:
            kw = {k: v for k, v in s.model_dump().items() if v is not None}
            for key in ("levels", "load_scales", "fd_steps"):
                if key in kw:
                    kw[key] = tuple(kw[key])
            kw.setdefault("seed", self.seed)
            try:
                plans.append(StudyPlan(**kw))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return plans


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for e in exc.errors():
        loc = ".".join(str(x) for x in e["loc"])
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"configuration is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping of sections")
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {_format_validation(exc)}") from None
    cfg.study_plans()  # validate plans eagerly
    return cfg


def load_config(path: str | Path) -> tuple[RunConfig, str]:
    """Parsed configuration and the SHA-256 of the file bytes."""
    data = Path(path).read_bytes()
    return parse_config(data.decode("utf-8")), hashlib.sha256(data).hexdigest()
