"""Structural mesh: wall solids, opening carving, floor and ceiling slabs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from worldmesh.errors import OpeningOutsideWall
from worldmesh.floorplan import FloorPlan, Opening, Room, SharedEdge, detect_shared_edges, shared_spans
from worldmesh.geom.boolean import mesh_subtract
from worldmesh.geom.mesh import TriMesh, box_mesh, prism_mesh
from worldmesh.geom.polygon import Polygon2D, offset_edges

SLAB_THICKNESS = 0.05
CUT_MARGIN = 0.001  # cutters overshoot every wall face by 1 mm
SPLIT_TOL = 1e-9

__all__ = [
    "SLAB_THICKNESS",
    "WallRun",
    "assemble_struct_mesh",
    "build_floor_ceiling",
    "build_room_walls",
    "carve_openings",
    "detect_shared_edges",
    "interior_polygon",
    "wall_runs",
]


@dataclass(frozen=True)
class WallRun:
    """A straight wall piece of one room with constant thickness."""

    room: str
    edge: int  # floor-polygon edge hosting the run
    index: int  # position of the run in the room's refined edge loop
    s0: float  # start / end offsets along the hosting edge
    s1: float
    thickness: float
    height: float
    outer: np.ndarray  # (2, 2) start/end on the floor polygon boundary
    inner: np.ndarray  # (2, 2) start/end on the room-side face
    shared_with: tuple[str, int] | None = None

    @property
    def surface(self) -> str:
        return f"{self.room}/wall/{self.index}"

    @property
    def direction(self) -> np.ndarray:
        d = self.outer[1] - self.outer[0]
        return d / np.linalg.norm(d)

    @property
    def inward(self) -> np.ndarray:
        d = self.direction
        return np.array([-d[1], d[0]])

    def footprint(self) -> np.ndarray:
        return np.array([self.outer[0], self.outer[1], self.inner[1], self.inner[0]])


def _normalize_shared(room: Room, shared) -> dict[int, list[tuple[float, float, str | None, int]]]:
    """Accept a set of fully shared edge ids or a SharedEdge list."""
    out: dict[int, list] = {}
    if shared is None:
        return out
    items = list(shared)
    if items and isinstance(items[0], SharedEdge):
        for e in range(len(room.floor_polygon)):
            for nb, nb_edge, span, _ in shared_spans(items, room.id, e):
                out.setdefault(e, []).append((span[0], span[1], nb, nb_edge))
    else:
        lengths = room.floor_polygon.edge_lengths()
        for e in items:
            out.setdefault(int(e), []).append((0.0, float(lengths[int(e)]), None, -1))
    for spans in out.values():
        spans.sort(key=lambda s: s[0])
    return out


def wall_runs(room: Room, wall_thickness: float, shared=None) -> list[WallRun]:
    """Split the room's edges at shared-span endpoints and offset each piece.

    Pieces inside a shared span are half thickness; the rest keep the full
    thickness. Inner endpoints come from a miter-joined offset of the refined
    edge loop, so neighbouring pieces share their joint faces exactly.
    """
    spans = _normalize_shared(room, shared)
    poly = room.floor_polygon
    pts, thick, meta = [], [], []
    for e in range(len(poly)):
        a, b = poly.edge(e)
        length = float(np.linalg.norm(b - a))
        u = (b - a) / length
        cuts = {0.0, length}
        for s0, s1, _, _ in spans.get(e, []):
            cuts.update(c for c in (s0, s1) if SPLIT_TOL < c < length - SPLIT_TOL)
        cuts = sorted(cuts)
        for c0, c1 in zip(cuts[:-1], cuts[1:]):
            mid = 0.5 * (c0 + c1)
            owner = next(((nb, ne) for s0, s1, nb, ne in spans.get(e, []) if s0 - SPLIT_TOL <= mid <= s1 + SPLIT_TOL),
                         None)
            pts.append(a + c0 * u)
            thick.append(wall_thickness / 2 if owner is not None else wall_thickness)
            meta.append((e, c0, c1, owner if owner and owner[0] is not None else None))
    refined = Polygon2D(np.array(pts))
    starts, ends = offset_edges(refined, np.array(thick))
    runs = []
    for k, (e, c0, c1, owner) in enumerate(meta):
        a, b = refined.edge(k)
        runs.append(WallRun(room.id, e, k, c0, c1, thick[k], room.ceiling_height,
                            np.array([a, b]), np.array([starts[k], ends[k]]), owner))
    return runs


def interior_polygon(room: Room, wall_thickness: float, shared=None) -> Polygon2D:
    """Room-side boundary of the wall ring (the walkable floor outline)."""
    runs = wall_runs(room, wall_thickness, shared)
    out: list[np.ndarray] = []
    for r in runs:
        for p in r.inner:
            if not out or np.linalg.norm(p - out[-1]) > 1e-9:
                out.append(p)
    if np.linalg.norm(out[0] - out[-1]) <= 1e-9:
        out.pop()
    # drop collinear points so downstream rectangle tests see the true corners
    keep = []
    n = len(out)
    for i in range(n):
        p, q, r = out[i - 1], out[i], out[(i + 1) % n]
        if abs((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])) > 1e-12:
            keep.append(q)
    return Polygon2D(np.array(keep))


def _run_mesh(run: WallRun) -> TriMesh:
    return prism_mesh(run.footprint(), 0.0, run.height, room=run.room, category="wall", surface=run.surface)


def build_room_walls(room: Room, wall_thickness: float, shared_edges=None) -> TriMesh:
    """Closed wall solids of one room, one convex prism per wall run."""
    return TriMesh.merge([_run_mesh(r) for r in wall_runs(room, wall_thickness, shared_edges)])


def _cutter(run: WallRun, op: Opening, outward: float) -> TriMesh:
    """Box cutter in the run's frame, overshooting both wall faces by CUT_MARGIN."""
    u, n = run.direction, run.inward
    edge_start = run.outer[0] - run.s0 * u
    z0 = op.sill if op.sill > 0 else -CUT_MARGIN
    z1 = op.head if op.head < run.height - 1e-9 else run.height + CUT_MARGIN
    lo = np.array([op.offset, -outward - CUT_MARGIN, z0])
    hi = np.array([op.offset + op.width, run.thickness + CUT_MARGIN, z1])
    box = box_mesh(lo, hi)
    rot = np.array([[u[0], n[0], 0.0], [u[1], n[1], 0.0], [0.0, 0.0, 1.0]])
    return box.transformed(rot, np.array([edge_start[0], edge_start[1], 0.0]))


def carve_openings(mesh: TriMesh, plan: FloorPlan, shared: Sequence[SharedEdge] | None = None) -> TriMesh:
    """Subtract every opening's box from the wall runs it crosses.

    Openings mirrored onto a neighbour by propagation carve the neighbour's
    runs at the co-located position, so a shared wall is open on both sides.
    The cutter depth covers the host run plus the neighbour's half wall.
    """
    if shared is None:
        shared = detect_shared_edges(plan)
    pieces: dict[str, TriMesh] = {}
    order: list[str] = []
    for sid in dict.fromkeys(mesh.surface.tolist()):
        pieces[sid] = mesh.select(mesh.surface == sid)
        order.append(sid)
    for room in plan.rooms:
        runs = wall_runs(room, plan.wall_thickness, shared)
        for idx, op in enumerate(room.openings):
            removed = 0.0
            for run in runs:
                if run.edge != op.edge or min(run.s1, op.offset + op.width) - max(run.s0, op.offset) <= 1e-9:
                    continue
                if run.surface not in pieces:
                    continue
                outward = plan.wall_thickness / 2 if run.shared_with else 0.0
                before = pieces[run.surface]
                after = mesh_subtract(before, _cutter(run, op, outward))
                removed += before.volume() - after.volume()
                pieces[run.surface] = after
            if removed <= 1e-9:
                raise OpeningOutsideWall(f"{room.id}/openings[{idx}] does not intersect any wall of {room.id}")
    return TriMesh.merge([pieces[s] for s in order])


def build_floor_ceiling(room: Room, slab_thickness: float = SLAB_THICKNESS) -> TriMesh:
    """Floor slab below z=0 and ceiling slab above the ceiling height."""
    fp = room.floor_polygon.vertices
    floor = prism_mesh(fp, -slab_thickness, 0.0, room=room.id, category="floor", surface=f"{room.id}/floor")
    ceil = prism_mesh(fp, room.ceiling_height, room.ceiling_height + slab_thickness,
                      room=room.id, category="ceiling", surface=f"{room.id}/ceiling")
    return TriMesh.merge([floor, ceil])


def assemble_struct_mesh(plan: FloorPlan, slab_thickness: float = SLAB_THICKNESS) -> TriMesh:
    """Walls of every room, carved, followed by all floor and ceiling slabs."""
    shared = detect_shared_edges(plan)
    walls = TriMesh.merge([build_room_walls(r, plan.wall_thickness, shared) for r in plan.rooms])
    carved = carve_openings(walls, plan, shared)
    slabs = [build_floor_ceiling(r, slab_thickness) for r in plan.rooms]
    return TriMesh.merge([carved, *slabs])

