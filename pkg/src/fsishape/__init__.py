"""Stationary Stokes / incompressible-elasticity interaction on a fixed reference
configuration, with shape derivatives by the direct and adjoint methods."""

__version__ = "0.1.0"

from .errors import ConfigError, EvalError, FsiError, MeshError, ParseError, SolverError  # noqa: F401
