"""Conforming triangle meshes of the solid annulus and the surrounding fluid box.

A single mesh carries both subdomains: every triangle is tagged SOLID or
FLUID and every boundary edge is tagged GAMMA0 (solid/fluid interface),
GAMMA_OMEGA (inner rim of the solid, clamped) or OUTER (box boundary).
Indices are 0-based throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import MeshError, ParseError

SOLID, FLUID = 0, 1
GAMMA0, GAMMA_OMEGA, OUTER = 0, 1, 2

REGION_NAMES = {SOLID: "solid", FLUID: "fluid"}
TAG_NAMES = {GAMMA0: "gamma0", GAMMA_OMEGA: "gammaomega", OUTER: "outer"}
_REGION_CODES = {v: k for k, v in REGION_NAMES.items()}
_TAG_CODES = {v: k for k, v in TAG_NAMES.items()}

DEFAULT_MIN_ANGLE = 20.0


# ---------------------------------------------------------------------------
# Interface curves (star-shaped with respect to the origin, polar form)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InterfaceCurve:
    """Closed curve r = radius(theta) around the origin.

    ``kind`` is one of ``circle``, ``ellipse``, ``star``; ``params`` holds the
    shape parameters in the order of the constructor functions below.
    """

    kind: str
    params: tuple[float, ...]

    def radius(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.kind == "circle":
            return np.full_like(theta, self.params[0])
        if self.kind == "ellipse":
            a, b = self.params
            return a * b / np.sqrt((b * np.cos(theta)) ** 2 + (a * np.sin(theta)) ** 2)
        if self.kind == "star":
            r0, amp, lobes = self.params
            return r0 * (1.0 + amp * np.cos(lobes * theta))
        raise ValueError(f"unknown curve kind {self.kind!r}")

    def point(self, theta) -> np.ndarray:
        r = self.radius(theta)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)

    def __str__(self) -> str:
        return f"{self.kind}({', '.join(f'{p:g}' for p in self.params)})"


def circle(r: float) -> InterfaceCurve:
    return InterfaceCurve("circle", (float(r),))


def ellipse(a: float, b: float) -> InterfaceCurve:
    return InterfaceCurve("ellipse", (float(a), float(b)))


def star(r0: float, amplitude: float, lobes: int) -> InterfaceCurve:
    return InterfaceCurve("star", (float(r0), float(amplitude), float(int(lobes))))


def parse_curve(text: str) -> InterfaceCurve:
    """Parse ``circle(0.5)``, ``ellipse(0.6, 0.4)`` or ``star(0.5, 0.1, 5)``."""
    import re

    m = re.fullmatch(r"\s*(circle|ellipse|star)\s*\(([^)]*)\)\s*", text)
    if not m:
        raise ParseError(f"cannot parse interface curve {text!r}", offset=0,
                         expected=frozenset({"circle(", "ellipse(", "star("}))
    try:
        args = [float(a) for a in m.group(2).split(",")]
    except ValueError:
        raise ParseError(f"non-numeric curve parameter in {text!r}", offset=0,
                         expected=frozenset({"NUMBER"})) from None
    ctor = {"circle": (circle, 1), "ellipse": (ellipse, 2), "star": (star, 3)}[m.group(1)]
    if len(args) != ctor[1]:
        raise ParseError(f"{m.group(1)} takes {ctor[1]} parameter(s)", offset=0,
                         expected=frozenset({"NUMBER"}))
    return ctor[0](*args)


@dataclass(frozen=True)
class GeometryConfig:
    """Box D = [-L, L]^2, clamped disk of radius ``support_radius``, interface curve."""

    box_half_width: float = 1.5
    support_radius: float = 0.2
    interface_curve: InterfaceCurve = field(default_factory=lambda: circle(0.5))
    target_edge_length: float = 0.15
    min_angle: float = DEFAULT_MIN_ANGLE

    def check(self) -> None:
        """Raise NESTING_VIOLATION unless omega inside Gamma0 inside D (sampled)."""
        L, rw, h = self.box_half_width, self.support_radius, self.target_edge_length
        if not (L > 0 and rw > 0 and h > 0):
            raise MeshError("box_half_width, support_radius and target_edge_length must be positive",
                            code="NESTING_VIOLATION")
        theta = np.linspace(0.0, 2.0 * np.pi, 4096, endpoint=False)
        r = self.interface_curve.radius(theta)
        if np.any(r <= rw):
            raise MeshError(f"support disk (radius {rw:g}) is not strictly inside the interface curve "
                            f"(min radius {r.min():g})", code="NESTING_VIOLATION", constraint="omega_in_gamma0")
        rbox = L / np.maximum(np.abs(np.cos(theta)), np.abs(np.sin(theta)))
        if np.any(r >= rbox):
            raise MeshError(f"interface curve {self.interface_curve} leaves the box [-{L:g}, {L:g}]^2",
                            code="NESTING_VIOLATION", constraint="gamma0_in_box")
        # simple closed curve: polar form with r > 0 is simple iff r is single valued,
        # which holds by construction; guard against pathological star amplitudes
        if np.any(r <= 0):
            raise MeshError("interface curve radius must stay positive", code="NESTING_VIOLATION",
                            constraint="simple_curve")


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------

def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable conforming triangulation with region and boundary tags."""

    nodes: np.ndarray          # (nv, 2) float
    triangles: np.ndarray      # (nt, 3) int, counter-clockwise
    regions: np.ndarray        # (nt,) int, SOLID | FLUID
    boundary_edges: np.ndarray  # (nb, 2) int
    boundary_tags: np.ndarray  # (nb,) int, GAMMA0 | GAMMA_OMEGA | OUTER

    def __post_init__(self):
        object.__setattr__(self, "nodes", _readonly(np.asarray(self.nodes, dtype=float).reshape(-1, 2)))
        object.__setattr__(self, "triangles", _readonly(np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)))
        object.__setattr__(self, "regions", _readonly(np.asarray(self.regions, dtype=np.int64).ravel()))
        object.__setattr__(self, "boundary_edges",
                           _readonly(np.asarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)))
        object.__setattr__(self, "boundary_tags", _readonly(np.asarray(self.boundary_tags, dtype=np.int64).ravel()))

    # -- basic sizes -------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def with_nodes(self, nodes: np.ndarray) -> "Mesh":
        return Mesh(nodes, self.triangles, self.regions, self.boundary_edges, self.boundary_tags)

    # -- geometry ----------------------------------------------------------
    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return _readonly(0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]))

    def region_area(self, region: int) -> float:
        return float(self.signed_areas[self.regions == region].sum())

    @cached_property
    def angles(self) -> np.ndarray:
        """Interior angles in degrees, shape (nt, 3), angle at each local vertex."""
        p = self.nodes[self.triangles]
        out = np.empty((len(p), 3))
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cos = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            out[:, k] = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
        return _readonly(out)

    @property
    def min_angle(self) -> float:
        return float(self.angles.min()) if self.n_triangles else 180.0

    # -- topology ----------------------------------------------------------
    @cached_property
    def _edge_data(self):
        t = self.triangles
        local = np.array([[0, 1], [1, 2], [2, 0]])
        all_edges = np.sort(t[:, local].reshape(-1, 2), axis=1)
        edges, inverse = np.unique(all_edges, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        tri_edges = inverse.reshape(-1, 3)
        # adjacency: up to two triangles per edge, -1 when absent
        edge_tris = -np.ones((len(edges), 2), dtype=np.int64)
        tri_ids = np.repeat(np.arange(len(t)), 3)
        order = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse, minlength=len(edges))
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        for slot in range(2):
            has = counts > slot
            edge_tris[has, slot] = tri_ids[order[starts[has] + slot]]
        return _readonly(edges), _readonly(tri_edges), _readonly(edge_tris), _readonly(counts)

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges (ne, 2), sorted node pairs."""
        return self._edge_data[0]

    @property
    def triangle_edges(self) -> np.ndarray:
        """Edge ids per triangle; local edge k joins local vertices k and k+1."""
        return self._edge_data[1]

    @property
    def edge_triangles(self) -> np.ndarray:
        return self._edge_data[2]

    @cached_property
    def boundary_edge_ids(self) -> np.ndarray:
        """Global edge id of every tagged boundary edge (aligned with boundary_edges)."""
        lookup = {tuple(e): i for i, e in enumerate(self.edges.tolist())}
        ids = []
        for a, b in self.boundary_edges.tolist():
            key = (a, b) if a < b else (b, a)
            if key not in lookup:
                raise MeshError(f"boundary edge ({a}, {b}) is not an edge of any triangle",
                                code="INVALID_MESH", invariant="boundary_edge_exists")
            ids.append(lookup[key])
        return _readonly(np.asarray(ids, dtype=np.int64))

    @property
    def n_p2_nodes(self) -> int:
        return self.n_nodes + len(self.edges)

    @cached_property
    def p2_nodes(self) -> np.ndarray:
        """Coordinates of the quadratic nodes: vertices then edge midpoints."""
        mid = 0.5 * (self.nodes[self.edges[:, 0]] + self.nodes[self.edges[:, 1]])
        return _readonly(np.vstack([self.nodes, mid]))

    @cached_property
    def triangle_p2(self) -> np.ndarray:
        """(nt, 6) quadratic node ids: 3 vertices then midpoints of edges 01, 12, 20."""
        return _readonly(np.hstack([self.triangles, self.n_nodes + self.triangle_edges]))

    def edges_with_tag(self, tag: int) -> np.ndarray:
        return np.flatnonzero(self.boundary_tags == tag)

    @cached_property
    def interface_nodes(self) -> np.ndarray:
        """Vertex ids on GAMMA0 (sorted)."""
        return _readonly(np.unique(self.boundary_edges[self.boundary_tags == GAMMA0]))

    def boundary_p2_nodes(self, tags: Sequence[int]) -> np.ndarray:
        """Quadratic node ids (vertices and midpoints) lying on edges with the given tags."""
        sel = np.isin(self.boundary_tags, list(tags))
        verts = self.boundary_edges[sel].ravel()
        mids = self.n_nodes + self.boundary_edge_ids[sel]
        return np.unique(np.concatenate([verts, mids]))

    def side_triangle(self, bedge: int, region: int) -> int:
        """The triangle of the given region adjacent to boundary edge ``bedge``."""
        for t in self.edge_triangles[self.boundary_edge_ids[bedge]]:
            if t >= 0 and self.regions[t] == region:
                return int(t)
        raise MeshError(f"boundary edge {bedge} has no adjacent {REGION_NAMES[region]} triangle",
                        code="INVALID_MESH", invariant="edge_region")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mesh):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("nodes", "triangles", "regions", "boundary_edges", "boundary_tags"))

    __hash__ = object.__hash__


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_mesh(mesh: Mesh, min_angle: float | None = DEFAULT_MIN_ANGLE) -> Mesh:
    """Check every structural invariant; raise INVALID_MESH naming the first violation."""
    nv = mesh.n_nodes
    if mesh.n_triangles == 0:
        raise MeshError("mesh has no triangles", code="INVALID_MESH", invariant="nonempty")
    for name, arr in (("triangles", mesh.triangles), ("boundary_edges", mesh.boundary_edges)):
        if arr.size and (arr.min() < 0 or arr.max() >= nv):
            raise MeshError(f"{name} reference a node index outside [0, {nv})",
                            code="INVALID_MESH", invariant="index_range")
    if not np.all(np.isin(mesh.regions, [SOLID, FLUID])):
        raise MeshError("unknown region tag", code="INVALID_MESH", invariant="region_tag")
    if not np.all(np.isin(mesh.boundary_tags, [GAMMA0, GAMMA_OMEGA, OUTER])):
        raise MeshError("unknown boundary tag", code="INVALID_MESH", invariant="boundary_tag")
    bad = np.flatnonzero(mesh.signed_areas <= 0)
    if bad.size:
        raise MeshError(f"triangle {bad[0]} is not positively oriented (area {mesh.signed_areas[bad[0]]:g})",
                        code="INVALID_MESH", invariant="orientation", triangle=int(bad[0]))
    counts = mesh._edge_data[3]
    if np.any(counts > 2):
        raise MeshError("an edge is shared by more than two triangles", code="INVALID_MESH",
                        invariant="manifold")
    bids = mesh.boundary_edge_ids
    if len(np.unique(bids)) != len(bids):
        raise MeshError("duplicate boundary edge", code="INVALID_MESH", invariant="boundary_unique")
    tagged = np.zeros(len(mesh.edges), dtype=bool)
    tagged[bids] = True
    et = mesh.edge_triangles
    open_edges = np.flatnonzero(counts == 1)
    if np.any(~tagged[open_edges]):
        raise MeshError("mesh boundary edge without a boundary tag", code="INVALID_MESH",
                        invariant="boundary_tagged")
    two = counts == 2
    reg0 = np.where(et[:, 0] >= 0, mesh.regions[np.maximum(et[:, 0], 0)], -1)
    reg1 = np.where(et[:, 1] >= 0, mesh.regions[np.maximum(et[:, 1], 0)], -1)
    mixed = two & (reg0 != reg1)
    for tag, tname in TAG_NAMES.items():
        ids = bids[mesh.boundary_tags == tag]
        if tag == GAMMA0:
            ok = mixed[ids]
            msg = "GAMMA0 edge must be shared by exactly one SOLID and one FLUID triangle"
        else:
            want = SOLID if tag == GAMMA_OMEGA else FLUID
            ok = (counts[ids] == 1) & (reg0[ids] == want)
            msg = f"{tname.upper()} edge must border exactly one {REGION_NAMES[want].upper()} triangle"
        if not np.all(ok):
            raise MeshError(msg, code="INVALID_MESH", invariant=f"{tname}_adjacency")
    gamma_set = set(bids[mesh.boundary_tags == GAMMA0].tolist())
    if set(np.flatnonzero(mixed).tolist()) != gamma_set:
        raise MeshError("solid/fluid edges not tagged GAMMA0 (interface not conforming)",
                        code="INVALID_MESH", invariant="conforming_interface")
    if min_angle is not None and mesh.min_angle < min_angle - 1e-9:
        raise MeshError(f"minimum angle {mesh.min_angle:.3f} deg below floor {min_angle:g}",
                        code="INVALID_MESH", invariant="min_angle")
    return mesh


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _square_ring(L: float, n_side: int) -> np.ndarray:
    """Counter-clockwise nodes on the square boundary, corners included, starting at angle -3pi/4."""
    s = np.arange(n_side) / n_side
    pts = []
    corners = [(-L, -L), (L, -L), (L, L), (-L, L)]
    for k in range(4):
        a = np.asarray(corners[k])
        b = np.asarray(corners[(k + 1) % 4])
        pts.append(a + np.outer(s, b - a))
    return np.vstack(pts)


def _zipper(inner_ids, inner_ang, outer_ids, outer_ang) -> list[tuple[int, int, int]]:
    """Triangulate the band between two closed rings sorted by polar angle."""
    m, n = len(inner_ids), len(outer_ids)
    # unwrap angles to be increasing, starting from the inner ring's first node
    a0 = inner_ang[0]
    ia = np.mod(inner_ang - a0, 2 * np.pi)
    oa = np.mod(outer_ang - a0, 2 * np.pi)
    j0 = int(np.argmin(np.minimum(oa, 2 * np.pi - oa)))
    # rotate outer ring so it starts at the closest node
    outer_ids = np.roll(outer_ids, -j0)
    oa = np.roll(oa, -j0)
    if oa[0] > np.pi:
        oa[0] -= 2 * np.pi
    oa[1:] = np.where(oa[1:] < oa[0], oa[1:] + 2 * np.pi, oa[1:])
    ia_ext = np.append(ia, ia[0] + 2 * np.pi)
    oa_ext = np.append(oa, oa[0] + 2 * np.pi)
    tris = []
    i = j = 0
    while i < m or j < n:
        if j >= n or (i < m and ia_ext[i + 1] <= oa_ext[j + 1]):
            tris.append((inner_ids[i % m], outer_ids[j % n], inner_ids[(i + 1) % m]))
            i += 1
        else:
            tris.append((inner_ids[i % m], outer_ids[j % n], outer_ids[(j + 1) % n]))
            j += 1
    return tris


def _smooth(nodes: np.ndarray, tris: np.ndarray, movable: np.ndarray, sweeps: int = 8) -> np.ndarray:
    """Laplacian smoothing of movable nodes; a move is kept only if it does not
    reduce the minimum angle of the node's star (deterministic Gauss-Seidel order)."""
    nodes = nodes.copy()
    nbrs: list[set[int]] = [set() for _ in range(len(nodes))]
    star: list[list[int]] = [[] for _ in range(len(nodes))]
    for t, (a, b, c) in enumerate(tris.tolist()):
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
        star[a].append(t)
        star[b].append(t)
        star[c].append(t)

    def star_quality(ts):
        p = nodes[tris[ts]]
        worst = np.inf
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
            if k == 0 and np.any(cross <= 0):
                return -np.inf
            cos = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            worst = min(worst, float(np.min(np.arccos(np.clip(cos, -1, 1)))))
        return worst

    order = np.flatnonzero(movable)
    for _ in range(sweeps):
        for v in order.tolist():
            ts = star[v]
            old = nodes[v].copy()
            q_old = star_quality(ts)
            nodes[v] = nodes[sorted(nbrs[v])].mean(axis=0)
            if star_quality(ts) < q_old:
                nodes[v] = old
    return nodes


def _flip_to_delaunay(nodes: np.ndarray, tris: np.ndarray, regions: np.ndarray,
                      max_passes: int = 50) -> np.ndarray:
    """Lawson flips of interior edges whose two triangles share a region
    (interface and boundary edges are never flipped)."""
    tris = tris.copy()
    for _ in range(max_passes):
        tmp = Mesh(nodes, tris, regions, np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))
        edges, tri_edges, edge_tris, counts = tmp._edge_data
        touched = np.zeros(len(tris), dtype=bool)
        flipped = 0
        for e in np.flatnonzero(counts == 2).tolist():
            t1, t2 = edge_tris[e]
            if regions[t1] != regions[t2] or touched[t1] or touched[t2]:
                continue
            a, b = edges[e]
            k1 = [k for k in range(3) if tris[t1][k] not in (a, b)][0]
            k2 = [k for k in range(3) if tris[t2][k] not in (a, b)][0]
            c, d = tris[t1][k1], tris[t2][k2]
            # orient so that t1 = (a, b, c) counter-clockwise
            a, b = tris[t1][(k1 + 1) % 3], tris[t1][(k1 + 2) % 3]
            pa, pb, pc, pd = nodes[a], nodes[b], nodes[c], nodes[d]

            def ang(p, q, r):
                u, v = q - p, r - p
                return math.atan2(abs(u[0] * v[1] - u[1] * v[0]), float(u @ v))

            if ang(pc, pa, pb) + ang(pd, pa, pb) <= math.pi + 1e-12:
                continue
            n1, n2 = (a, d, c), (d, b, c)
            ok = True
            for t in (n1, n2):
                p = nodes[list(t)]
                if (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0]) <= 0:
                    ok = False
            if not ok:
                continue
            tris[t1], tris[t2] = n1, n2
            touched[t1] = touched[t2] = True
            flipped += 1
        if flipped == 0:
            break
    return tris


def generate_annular_mesh(cfg: GeometryConfig) -> Mesh:
    """Radially layered mesh: rings from the support circle out to Gamma0 (solid),
    then from Gamma0 out to the square (fluid), zipped together ring by ring."""
    cfg.check()
    L, rw, h, curve = cfg.box_half_width, cfg.support_radius, cfg.target_edge_length, cfg.interface_curve

    def ring_count(perimeter: float) -> int:
        return max(8, int(round(perimeter / h)))

    fine = np.linspace(0.0, 2 * np.pi, 2048, endpoint=False)
    r_gamma = curve.radius(fine)
    r_box = L / np.maximum(np.abs(np.cos(fine)), np.abs(np.sin(fine)))
    n_solid = max(1, int(round(float(np.mean(r_gamma - rw)) / h)))
    n_fluid = max(2, int(round(float(np.mean(r_box - r_gamma)) / h)))

    def perimeter(r):
        pts = np.stack([r * np.cos(fine), r * np.sin(fine)], axis=1)
        return float(np.sum(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)))

    rings: list[np.ndarray] = []   # node coordinates per ring
    kinds: list[str] = []
    # solid rings: s = 0 (support circle) .. 1 (interface)
    for k in range(n_solid + 1):
        s = k / n_solid
        r_fine = (1 - s) * rw + s * r_gamma
        n = ring_count(perimeter(r_fine))
        th = 2 * np.pi * np.arange(n) / n + (0.5 * np.pi / n) * (k % 2)
        r = (1 - s) * rw + s * curve.radius(th)
        rings.append(np.stack([r * np.cos(th), r * np.sin(th)], axis=1))
        kinds.append("omega" if k == 0 else ("gamma0" if k == n_solid else "solid"))
    # fluid rings: s = 0 (interface, already added) .. 1 (square)
    n_side = max(2, int(round(2 * L / h)))
    for k in range(1, n_fluid + 1):
        s = k / n_fluid
        if k == n_fluid:
            rings.append(_square_ring(L, n_side))
            kinds.append("outer")
            continue
        r_fine = (1 - s) * r_gamma + s * r_box
        n = ring_count(perimeter(r_fine))
        th = 2 * np.pi * np.arange(n) / n + (0.5 * np.pi / n) * (k % 2)
        rb = L / np.maximum(np.abs(np.cos(th)), np.abs(np.sin(th)))
        r = (1 - s) * curve.radius(th) + s * rb
        rings.append(np.stack([r * np.cos(th), r * np.sin(th)], axis=1))
        kinds.append("fluid")

    offsets = np.cumsum([0] + [len(r) for r in rings])
    nodes = np.vstack(rings)
    ids = [np.arange(offsets[i], offsets[i + 1]) for i in range(len(rings))]
    angles = [np.mod(np.arctan2(r[:, 1], r[:, 0]), 2 * np.pi) for r in rings]
    # sort each ring by polar angle so the zipper walks counter-clockwise
    for i in range(len(rings)):
        o = np.argsort(angles[i], kind="stable")
        ids[i], angles[i] = ids[i][o], angles[i][o]

    tris, regs = [], []
    for i in range(len(rings) - 1):
        band = _zipper(ids[i], angles[i], ids[i + 1], angles[i + 1])
        tris.extend(band)
        regs.extend([SOLID if i < n_solid else FLUID] * len(band))
    tris_arr = np.asarray(tris, dtype=np.int64)

    def loop_edges(ring_ids):
        return np.stack([ring_ids, np.roll(ring_ids, -1)], axis=1)

    bedges = np.vstack([loop_edges(ids[n_solid]), loop_edges(ids[0]), loop_edges(ids[-1])])
    btags = np.concatenate([np.full(len(ids[n_solid]), GAMMA0), np.full(len(ids[0]), GAMMA_OMEGA),
                            np.full(len(ids[-1]), OUTER)])

    movable = np.ones(len(nodes), dtype=bool)
    movable[ids[0]] = movable[ids[n_solid]] = movable[ids[-1]] = False
    regs_arr = np.asarray(regs, dtype=np.int64)
    for _ in range(2):
        tris_arr = _flip_to_delaunay(nodes, tris_arr, regs_arr)
        nodes = _smooth(nodes, tris_arr, movable, sweeps=4)
    tris_arr = _flip_to_delaunay(nodes, tris_arr, regs_arr)
    mesh = Mesh(nodes, tris_arr, regs_arr, bedges, btags)
    try:
        validate_mesh(mesh, min_angle=None)
    except MeshError as exc:  # pragma: no cover - generator bug guard
        raise MeshError(f"generator produced an invalid mesh: {exc.args[0]}", code="QUALITY_FAILURE") from exc
    if mesh.min_angle < cfg.min_angle:
        raise MeshError(f"minimum angle {mesh.min_angle:.2f} deg below floor {cfg.min_angle:g} deg; "
                        "try a smaller target_edge_length", code="QUALITY_FAILURE", min_angle=mesh.min_angle)
    return mesh


def generate_box_pair_mesh(n: int, length: float = 1.0) -> Mesh:
    """Structured two-box mesh used by manufactured-solution studies.

    SOLID occupies [0, l] x [0, l] and is clamped (GAMMA_OMEGA) on its left,
    bottom and top sides; FLUID occupies [l, 2l] x [0, l] with OUTER on its
    remaining sides; the shared side x = l is GAMMA0.  Cells are split with a
    diagonal through the nearest box corner so that no triangle has all its
    vertices on the boundary.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    l = float(length)
    nx, ny = 2 * n, n
    xs = np.linspace(0.0, 2 * l, nx + 1)
    ys = np.linspace(0.0, l, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

    def vid(i, j):
        return j * (nx + 1) + i

    tris, regs = [], []
    for j in range(ny):
        for i in range(nx):
            region = SOLID if i < n else FLUID
            li = i - (0 if i < n else n)
            lower = j < ny / 2
            left = li < n / 2
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if lower == left:  # "/" diagonal
                tris += [(a, b, c), (a, c, d)]
            else:  # "\" diagonal
                tris += [(a, b, d), (b, c, d)]
            regs += [region, region]
    bedges, btags = [], []
    for i in range(nx):
        tag = GAMMA_OMEGA if i < n else OUTER
        bedges += [(vid(i, 0), vid(i + 1, 0)), (vid(i + 1, ny), vid(i, ny))]
        btags += [tag, tag]
    for j in range(ny):
        bedges.append((vid(0, j + 1), vid(0, j)))
        btags.append(GAMMA_OMEGA)
        bedges.append((vid(nx, j), vid(nx, j + 1)))
        btags.append(OUTER)
        bedges.append((vid(n, j), vid(n, j + 1)))
        btags.append(GAMMA0)
    return validate_mesh(Mesh(nodes, np.asarray(tris), np.asarray(regs), np.asarray(bedges), np.asarray(btags)),
                         min_angle=None)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def save_mesh(mesh: Mesh, path: str | Path) -> None:
    """Write the ``fsimesh 1`` text format (coordinates with 17 significant digits)."""
    lines = ["fsimesh 1", f"nodes {mesh.n_nodes}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.nodes.tolist()]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{a} {b} {c} {REGION_NAMES[r]}" for (a, b, c), r in zip(mesh.triangles.tolist(), mesh.regions.tolist())]
    lines.append(f"bedges {len(mesh.boundary_edges)}")
    lines += [f"{a} {b} {TAG_NAMES[t]}" for (a, b), t in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_mesh(path: str | Path, min_angle: float | None = DEFAULT_MIN_ANGLE) -> Mesh:
    """Read and validate a mesh in the ``fsimesh 1`` format."""
    text = Path(path).read_text(encoding="ascii")
    return parse_mesh(text, min_angle=min_angle)


def parse_mesh(text: str, min_angle: float | None = DEFAULT_MIN_ANGLE) -> Mesh:
    raw = text.splitlines()
    lines = [(i + 1, ln.split()) for i, ln in enumerate(raw) if ln.strip() and not ln.lstrip().startswith("#")]
    pos = 0

    def take(expect: str):
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(f"unexpected end of file, expected {expect}", line=len(raw) + 1,
                             expected=frozenset({expect}))
        item = lines[pos]
        pos += 1
        return item

    def header(word: str) -> int:
        ln, toks = take(f"'{word} <count>'")
        if len(toks) != 2 or toks[0] != word or not toks[1].isdigit():
            raise ParseError(f"expected '{word} <count>'", line=ln, expected=frozenset({word}))
        return int(toks[1])

    ln, toks = take("'fsimesh 1'")
    if toks != ["fsimesh", "1"]:
        raise ParseError("missing 'fsimesh 1' header", line=ln, expected=frozenset({"fsimesh 1"}))

    def records(count: int, arity: int, conv: Sequence[Callable[[str], object]], what: str):
        out = []
        for _ in range(count):
            ln, toks = take(what)
            if len(toks) != arity:
                raise ParseError(f"{what} record needs {arity} fields, got {len(toks)}", line=ln,
                                 expected=frozenset({what}))
            try:
                out.append([c(t) for c, t in zip(conv, toks)])
            except (ValueError, KeyError):
                raise ParseError(f"malformed {what} record", line=ln, expected=frozenset({what})) from None
        return out

    nn = header("nodes")
    nodes = records(nn, 2, (float, float), "node")
    nt = header("triangles")
    tris = records(nt, 4, (int, int, int, lambda s: _REGION_CODES[s]), "triangle")
    nb = header("bedges")
    bed = records(nb, 3, (int, int, lambda s: _TAG_CODES[s]), "bedge")
    if pos != len(lines):
        raise ParseError("trailing content after bedges section", line=lines[pos][0], expected=frozenset({"EOF"}))
    t = np.asarray(tris, dtype=object).reshape(-1, 4)
    b = np.asarray(bed, dtype=object).reshape(-1, 3)
    mesh = Mesh(np.asarray(nodes, dtype=float).reshape(-1, 2), t[:, :3].astype(np.int64),
                t[:, 3].astype(np.int64), b[:, :2].astype(np.int64), b[:, 2].astype(np.int64))
    return validate_mesh(mesh, min_angle=min_angle)


# ---------------------------------------------------------------------------
# Deformation and normals
# ---------------------------------------------------------------------------

def deform_mesh(mesh: Mesh, phi) -> Mesh:
    """Move every vertex x to x + phi(x); connectivity and tags are kept.

    ``phi`` is a :class:`~fsishape.expr.VectorField` or any callable mapping an
    (n, 2) array of points to an (n, 2) array of displacements.
    """
    from .expr import VectorField

    if isinstance(phi, VectorField):
        if phi.is_zero():
            return mesh
        disp = phi.eval(mesh.nodes[:, 0], mesh.nodes[:, 1])
    else:
        disp = np.asarray(phi(mesh.nodes), dtype=float)
    if not np.any(disp):
        return mesh
    moved = mesh.with_nodes(mesh.nodes + disp)
    bad = np.flatnonzero(moved.signed_areas <= 0)
    if bad.size:
        raise MeshError(f"deformed triangle {bad[0]} has non-positive area", code="TANGLED_MESH",
                        triangle=int(bad[0]))
    return moved


def boundary_normals(mesh: Mesh, bedges: np.ndarray | None = None) -> np.ndarray:
    """Unit normals of boundary edges: out of SOLID on GAMMA0 and GAMMA_OMEGA,
    out of FLUID on OUTER."""
    idx = np.arange(len(mesh.boundary_edges)) if bedges is None else np.atleast_1d(bedges)
    out = np.empty((len(idx), 2))
    for k, e in enumerate(idx.tolist()):
        tag = mesh.boundary_tags[e]
        region = FLUID if tag == OUTER else SOLID
        t = mesh.side_triangle(e, region)
        a, b = mesh.boundary_edges[e]
        pa, pb = mesh.nodes[a], mesh.nodes[b]
        d = pb - pa
        n = np.array([d[1], -d[0]]) / math.hypot(d[0], d[1])
        third = [v for v in mesh.triangles[t] if v != a and v != b][0]
        if np.dot(mesh.nodes[third] - pa, n) > 0:
            n = -n
        out[k] = n
    return out


def boundary_normal(mesh: Mesh, edge: int) -> np.ndarray:
    """Unit outward normal of one boundary edge (see :func:`boundary_normals`)."""
    return boundary_normals(mesh, np.array([edge]))[0]


def mesh_report(mesh: Mesh) -> dict:
    """Counts and quality figures used by the command line report."""
    return {
        "nodes": mesh.n_nodes,
        "triangles": mesh.n_triangles,
        "solid_triangles": int(np.sum(mesh.regions == SOLID)),
        "fluid_triangles": int(np.sum(mesh.regions == FLUID)),
        "gamma0_edges": int(np.sum(mesh.boundary_tags == GAMMA0)),
        "gammaomega_edges": int(np.sum(mesh.boundary_tags == GAMMA_OMEGA)),
        "outer_edges": int(np.sum(mesh.boundary_tags == OUTER)),
        "min_angle_deg": mesh.min_angle,
        "solid_area": mesh.region_area(SOLID),
        "fluid_area": mesh.region_area(FLUID),
    }
