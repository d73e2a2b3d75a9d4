"""Error types shared by every module.

All failures raised by the toolkit derive from :class:`FsiError` and carry a
stable machine-readable ``code`` (e.g. ``"PARSE_ERROR"``) plus free-form
details, so that the command line can map them onto exit codes.
"""
from __future__ import annotations

from typing import Any


class FsiError(Exception):
    """Base class: ``code`` is a stable identifier, ``details`` extra context."""

    code = "FSI_ERROR"

    def __init__(self, message: str, code: str | None = None, **details: Any):
        super().__init__(message)
        if code is not None:
            self.code = code
        self.details = details

    def __str__(self) -> str:  # pragma: no cover - formatting only
        return f"{self.code}: {self.args[0]}"


class ParseError(FsiError):
    """Syntax error in an expression or a mesh file.

    ``offset`` is a byte offset (expressions), ``line`` a 1-based line number
    (mesh files); ``expected`` is the set of tokens that would have been valid.
    """

    code = "PARSE_ERROR"

    def __init__(self, message: str, offset: int | None = None,
                 expected: frozenset[str] | None = None, line: int | None = None):
        super().__init__(message, offset=offset, expected=expected, line=line)
        self.offset = offset
        self.expected = expected or frozenset()
        self.line = line


class EvalError(FsiError):
    """Expression evaluated outside its domain (division by zero, sqrt < 0)."""

    code = "EVAL_ERROR"


class MeshError(FsiError):
    """Geometry problems: NESTING_VIOLATION, QUALITY_FAILURE, INVALID_MESH, TANGLED_MESH."""

    code = "INVALID_MESH"


class SolverError(FsiError):
    """Numerical failures: SINGULAR_SYSTEM, MAX_ITER_EXCEEDED, NONINVERTIBLE_TRANSFORM, ..."""

    code = "SOLVER_ERROR"


class ConfigError(FsiError):
    """Run configuration failed schema validation."""

    code = "CONFIG_ERROR"
