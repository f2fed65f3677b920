"""Layout documents: parsing, shared-edge detection, validity rules, sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Collection, Protocol

import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon

from worldmesh.errors import ExhaustedAttempts, InvalidPolygon, InvariantError, SchemaError
from worldmesh.geom.polygon import Polygon2D

LAYOUT_VERSION = "worldmesh-layout/1"
EDGE_MATCH_TOL = 0.01  # m, co-location tolerance for shared walls
MIN_SHARED_OVERLAP = 0.1  # m
OPENING_KINDS = ("door", "window", "passage")
WALKABLE_KINDS = ("door", "passage")

ALL_RULES = ("R1", "R2", "R3", "R4", "R5")
RULE_DESCRIPTIONS = {
    "R1": "no window on an edge shared between two rooms",
    "R2": "rooms do not overlap in area",
    "R3": "rooms are connected through doors or passages",
    "R4": "doors and passages on shared edges have a co-located counterpart",
    "R5": "openings on one edge do not overlap",
}


@dataclass(frozen=True)
class Opening:
    kind: str
    edge: int
    offset: float
    width: float
    sill: float
    head: float
    mirror_of: tuple[str, int] | None = None  # (room id, opening index) when propagated

    @property
    def walkable(self) -> bool:
        return self.kind in WALKABLE_KINDS


@dataclass(frozen=True, eq=False)
class Room:
    id: str
    kind: str
    floor_polygon: Polygon2D
    ceiling_height: float
    openings: tuple[Opening, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "openings", tuple(self.openings))
        if not 2.0 < self.ceiling_height < 6.0:
            raise InvariantError(f"room {self.id}: ceiling_height {self.ceiling_height} outside (2, 6) m", (self.id,))
        if self.floor_polygon.area < 1.0:
            raise InvariantError(f"room {self.id}: floor area below 1 m^2", (self.id,))
        lengths = self.floor_polygon.edge_lengths()
        for i, op in enumerate(self.openings):
            oid = f"{self.id}/openings[{i}]"
            if op.kind not in OPENING_KINDS:
                raise InvariantError(f"{oid}: unknown kind {op.kind!r}", (oid,))
            if not 0 <= op.edge < len(lengths):
                raise InvariantError(f"{oid}: edge {op.edge} does not exist", (oid,))
            if op.offset < 0 or op.width <= 0 or op.offset + op.width > lengths[op.edge] + 1e-9:
                raise InvariantError(f"{oid}: span exceeds hosting edge", (oid,))
            if not 0 <= op.sill < op.head <= self.ceiling_height + 1e-9:
                raise InvariantError(f"{oid}: needs 0 <= sill < head <= ceiling_height", (oid,))
            if op.walkable and op.width < 0.5:
                raise InvariantError(f"{oid}: {op.kind} narrower than 0.5 m", (oid,))
            if op.walkable and op.sill != 0:
                raise InvariantError(f"{oid}: {op.kind} must start at the floor", (oid,))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Room)
            and (self.id, self.kind, self.ceiling_height, self.openings)
            == (other.id, other.kind, other.ceiling_height, other.openings)
            and self.floor_polygon == other.floor_polygon
        )

    def edge_frame(self, i: int) -> tuple[np.ndarray, np.ndarray, float]:
        """(start point, unit direction, length) of floor-polygon edge i."""
        a, b = self.floor_polygon.edge(i)
        length = float(np.linalg.norm(b - a))
        return a, (b - a) / length, length

    @property
    def declared_openings(self) -> tuple[Opening, ...]:
        return tuple(o for o in self.openings if o.mirror_of is None)


@dataclass(frozen=True)
class SharedEdge:
    room_a: str
    edge_a: int
    room_b: str
    edge_b: int
    overlap_segment: tuple[tuple[float, float], tuple[float, float]]
    span_a: tuple[float, float]  # overlap as offsets along edge_a
    span_b: tuple[float, float]  # overlap as offsets along edge_b

    @property
    def length(self) -> float:
        return self.span_a[1] - self.span_a[0]


@dataclass(frozen=True, eq=False)
class FloorPlan:
    wall_thickness: float
    rooms: tuple[Room, ...]
    theme: str = ""

    def __post_init__(self):
        object.__setattr__(self, "rooms", tuple(self.rooms))
        if not 0.02 < self.wall_thickness < 1.0:
            raise InvariantError(f"wall_thickness {self.wall_thickness} outside (0.02, 1.0) m")
        ids = [r.id for r in self.rooms]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise InvariantError(f"duplicate room ids {dupes}", tuple(dupes))
        if not self.rooms:
            raise InvariantError("layout has no rooms")
        for r in self.rooms:
            for o in r.openings:
                if o.mirror_of is not None and o.mirror_of[0] not in ids:
                    raise InvariantError(f"room {r.id}: opening references unknown room {o.mirror_of[0]}", (r.id,))

    def __eq__(self, other) -> bool:
        return isinstance(other, FloorPlan) and (self.wall_thickness, self.rooms, self.theme) == (
            other.wall_thickness, other.rooms, other.theme)

    def room(self, room_id: str) -> Room:
        for r in self.rooms:
            if r.id == room_id:
                return r
        raise KeyError(room_id)

    @property
    def room_ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.rooms)


@dataclass(frozen=True)
class Violation:
    rule_id: str
    message: str
    offending_ids: tuple[str, ...]
    inferred: bool  # rule not enumerated by the source method, added for mesh construction


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    def rules_violated(self) -> set[str]:
        return {v.rule_id for v in self.violations}

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "violations": [
                {"rule_id": v.rule_id, "message": v.message, "offending_ids": list(v.offending_ids),
                 "inferred": v.inferred}
                for v in self.violations
            ],
        }


# -- parsing -------------------------------------------------------------

def _get(obj: Any, key: str, path: str, kind, required: bool = True, default=None):
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    if key not in obj:
        if required:
            raise SchemaError(f"{path}.{key}" if path else key, "missing field")
        return default
    val = obj[key]
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if float in kinds and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if isinstance(val, bool) or not isinstance(val, kinds):
        names = "/".join(k.__name__ for k in kinds)
        raise SchemaError(f"{path}.{key}" if path else key, f"expected {names}, got {type(val).__name__}")
    return val


def _parse_room(doc: dict, path: str) -> Room:
    rid = _get(doc, "id", path, str)
    poly_raw = _get(doc, "floor_polygon", path, list)
    pts = []
    for i, p in enumerate(poly_raw):
        if (not isinstance(p, list) or len(p) != 2
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in p)):
            raise SchemaError(f"{path}.floor_polygon[{i}]", "expected [x, y]")
        pts.append([float(p[0]), float(p[1])])
    try:
        poly = Polygon2D(np.array(pts))
    except InvalidPolygon as exc:
        raise InvariantError(f"room {rid}: {exc}", (rid,)) from exc
    openings = []
    for i, o in enumerate(_get(doc, "openings", path, list, required=False, default=[])):
        opath = f"{path}.openings[{i}]"
        kind = _get(o, "kind", opath, str)
        if kind not in OPENING_KINDS:
            raise SchemaError(f"{opath}.kind", f"must be one of {OPENING_KINDS}")
        openings.append(Opening(
            kind=kind,
            edge=_get(o, "edge", opath, int),
            offset=_get(o, "offset", opath, float),
            width=_get(o, "width", opath, float),
            sill=_get(o, "sill", opath, float, required=False, default=0.0),
            head=_get(o, "head", opath, float),
        ))
    return Room(
        id=rid,
        kind=_get(doc, "kind", path, str),
        floor_polygon=poly,
        ceiling_height=_get(doc, "ceiling_height", path, float),
        openings=tuple(openings),
    )


def parse_layout(document: str | bytes) -> FloorPlan:
    """Parse a layout document and resolve opening propagation across shared walls."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from exc
    version = _get(doc, "version", "", str)
    if version != LAYOUT_VERSION:
        raise SchemaError("version", f"unsupported version {version!r}")
    rooms_raw = _get(doc, "rooms", "", list)
    rooms = tuple(_parse_room(r, f"rooms[{i}]") for i, r in enumerate(rooms_raw))
    plan = FloorPlan(
        wall_thickness=_get(doc, "wall_thickness", "", float),
        rooms=rooms,
        theme=_get(doc, "theme", "", str),
    )
    return propagate_openings(plan)


def layout_to_dict(plan: FloorPlan) -> dict:
    return {
        "version": LAYOUT_VERSION,
        "theme": plan.theme,
        "wall_thickness": plan.wall_thickness,
        "rooms": [
            {
                "id": r.id,
                "kind": r.kind,
                "ceiling_height": r.ceiling_height,
                "floor_polygon": r.floor_polygon.vertices.tolist(),
                "openings": [
                    {"kind": o.kind, "edge": o.edge, "offset": o.offset, "width": o.width,
                     "sill": o.sill, "head": o.head}
                    for o in r.declared_openings
                ],
            }
            for r in plan.rooms
        ],
    }


def serialize_layout(plan: FloorPlan) -> str:
    return json.dumps(layout_to_dict(plan), indent=2)


# -- shared edges ------------------------------------------------------------

def detect_shared_edges(plan: FloorPlan, tol: float = EDGE_MATCH_TOL,
                        min_overlap: float = MIN_SHARED_OVERLAP) -> list[SharedEdge]:
    """Antiparallel floor-polygon edges of distinct rooms lying on a common line.

    Both endpoints of each edge must be within ``tol`` of the other edge's
    supporting line, and the overlap must be at least ``min_overlap`` long.
    Results are ordered by (room index, edge index) of the first room.
    """
    out = []
    rooms = plan.rooms
    for ia in range(len(rooms)):
        for ib in range(ia + 1, len(rooms)):
            ra, rb = rooms[ia], rooms[ib]
            for ea in range(len(ra.floor_polygon)):
                a0, ua, la = ra.edge_frame(ea)
                na = np.array([-ua[1], ua[0]])
                for eb in range(len(rb.floor_polygon)):
                    b0, ub, lb = rb.edge_frame(eb)
                    if ua @ ub > -0.999:
                        continue  # only antiparallel edges can face each other
                    b1 = b0 + lb * ub
                    nb = np.array([-ub[1], ub[0]])
                    a1 = a0 + la * ua
                    if max(abs((b0 - a0) @ na), abs((b1 - a0) @ na)) > tol:
                        continue
                    if max(abs((a0 - b0) @ nb), abs((a1 - b0) @ nb)) > tol:
                        continue
                    t0, t1 = sorted(((b0 - a0) @ ua, (b1 - a0) @ ua))
                    lo, hi = max(0.0, t0), min(la, t1)
                    if hi - lo < min_overlap:
                        continue
                    pa, pb = a0 + lo * ua, a0 + hi * ua
                    sb = sorted(((pa - b0) @ ub, (pb - b0) @ ub))
                    out.append(SharedEdge(
                        ra.id, ea, rb.id, eb,
                        (tuple(pa.tolist()), tuple(pb.tolist())),
                        (float(lo), float(hi)),
                        (float(max(0.0, sb[0])), float(min(lb, sb[1]))),
                    ))
    return out


def shared_spans(shared: list[SharedEdge], room_id: str, edge: int):
    """Yield (neighbor room, neighbor edge, own span, neighbor span) for one edge."""
    for s in shared:
        if (s.room_a, s.edge_a) == (room_id, edge):
            yield s.room_b, s.edge_b, s.span_a, s.span_b
        elif (s.room_b, s.edge_b) == (room_id, edge):
            yield s.room_a, s.edge_a, s.span_b, s.span_a


def map_span(plan: FloorPlan, room_id: str, edge: int, span, other_room: str, other_edge: int):
    """Convert an offset interval on one edge to the co-located interval on another."""
    a0, ua, _ = plan.room(room_id).edge_frame(edge)
    b0, ub, _ = plan.room(other_room).edge_frame(other_edge)
    t = sorted(((a0 + s * ua - b0) @ ub for s in span))
    return float(t[0]), float(t[1])


def _contained(inner, outer, tol=EDGE_MATCH_TOL) -> bool:
    return inner[0] >= outer[0] - tol and inner[1] <= outer[1] + tol


def _overlap_len(a, b) -> float:
    return min(a[1], b[1]) - max(a[0], b[0])


def propagate_openings(plan: FloorPlan) -> FloorPlan:
    """Mirror every declared opening lying on a shared span onto the neighbor edge."""
    shared = detect_shared_edges(plan)
    extra: dict[str, list[Opening]] = {r.id: [] for r in plan.rooms}
    for room in plan.rooms:
        for idx, op in enumerate(room.openings):
            if op.mirror_of is not None:
                continue
            span = (op.offset, op.offset + op.width)
            for nb, nb_edge, own, _ in shared_spans(shared, room.id, op.edge):
                if not _contained(span, own):
                    continue
                lo, hi = map_span(plan, room.id, op.edge, span, nb, nb_edge)
                nb_room = plan.room(nb)
                if any(
                    o.edge == nb_edge and o.kind == op.kind
                    and abs(o.offset - lo) <= EDGE_MATCH_TOL and abs(o.width - op.width) <= EDGE_MATCH_TOL
                    for o in nb_room.declared_openings
                ):
                    continue  # counterpart already declared on the neighbor
                lo = max(0.0, lo)
                width = min(op.width, nb_room.edge_frame(nb_edge)[2] - lo)
                extra[nb].append(replace(op, edge=nb_edge, offset=lo, width=width, mirror_of=(room.id, idx)))
    rooms = tuple(
        Room(r.id, r.kind, r.floor_polygon, r.ceiling_height, r.declared_openings + tuple(extra[r.id]))
        for r in plan.rooms
    )
    return FloorPlan(plan.wall_thickness, rooms, plan.theme)


# -- validation ---------------------------------------------------------------

def _opening_id(room_id: str, idx: int) -> str:
    return f"{room_id}/openings[{idx}]"


def validate_layout(plan: FloorPlan, rules: Collection[str] = ALL_RULES) -> ValidationReport:
    """Apply the validity rule set; violations are returned, never raised."""
    shared = detect_shared_edges(plan)
    found: list[Violation] = []

    def add(rule, message, ids):
        found.append(Violation(rule, message, tuple(sorted(ids)), rule != "R1"))

    if "R1" in rules:
        for room in plan.rooms:
            for idx, op in enumerate(room.declared_openings):
                if op.kind != "window":
                    continue
                span = (op.offset, op.offset + op.width)
                for nb, _, own, _ in shared_spans(shared, room.id, op.edge):
                    if _overlap_len(span, own) > EDGE_MATCH_TOL:
                        add("R1", f"window on wall shared by {room.id} and {nb}", [_opening_id(room.id, idx)])
                        break

    if "R2" in rules:
        polys = [ShapelyPolygon(r.floor_polygon.vertices) for r in plan.rooms]
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                area = polys[i].intersection(polys[j]).area
                if area >= 1e-4:
                    a, b = plan.rooms[i].id, plan.rooms[j].id
                    add("R2", f"rooms {a} and {b} overlap by {area:.4f} m^2", [a, b])

    if "R3" in rules and len(plan.rooms) > 1:
        adj = {r.id: set() for r in plan.rooms}
        for room in plan.rooms:
            for op in room.openings:
                if not op.walkable:
                    continue
                span = (op.offset, op.offset + op.width)
                for nb, _, own, _ in shared_spans(shared, room.id, op.edge):
                    if _contained(span, own):
                        adj[room.id].add(nb)
                        adj[nb].add(room.id)
        components = []
        seen: set[str] = set()
        for r in plan.rooms:
            if r.id in seen:
                continue
            stack, comp = [r.id], set()
            while stack:
                cur = stack.pop()
                if cur in comp:
                    continue
                comp.add(cur)
                stack.extend(adj[cur] - comp)
            seen |= comp
            components.append(comp)
        if len(components) > 1:
            largest = max(components, key=lambda c: (len(c), sorted(c)))
            cut_off = sorted(set().union(*components) - largest)
            add("R3", f"{len(components)} disconnected room groups", cut_off)

    if "R4" in rules:
        for room in plan.rooms:
            for idx, op in enumerate(room.declared_openings):
                if not op.walkable:
                    continue
                span = (op.offset, op.offset + op.width)
                for nb, _, own, _ in shared_spans(shared, room.id, op.edge):
                    if _overlap_len(span, own) > EDGE_MATCH_TOL and not _contained(span, own):
                        add("R4", f"{op.kind} straddles the end of the wall shared with {nb}",
                            [_opening_id(room.id, idx)])

    if "R5" in rules:
        for room in plan.rooms:
            ops = list(enumerate(room.openings))
            for a in range(len(ops)):
                for b in range(a + 1, len(ops)):
                    (ia, oa), (ib, ob) = ops[a], ops[b]
                    if oa.edge != ob.edge:
                        continue
                    if _overlap_len((oa.offset, oa.offset + oa.width), (ob.offset, ob.offset + ob.width)) > 1e-9:
                        ids = [_opening_id(room.id, ia) if oa.mirror_of is None else _opening_id(*oa.mirror_of),
                               _opening_id(room.id, ib) if ob.mirror_of is None else _opening_id(*ob.mirror_of)]
                        add("R5", f"openings overlap on edge {oa.edge} of {room.id}", ids)

    found.sort(key=lambda v: (v.rule_id, v.offending_ids, v.message))
    return ValidationReport(tuple(found))


# -- sampling ---------------------------------------------------------------

class LayoutProvider(Protocol):
    def sample(self, prompt: str) -> str:
        """Return one candidate layout document."""


@dataclass
class SamplingResult:
    plan: FloorPlan
    attempts: int
    reports: list[ValidationReport] = field(default_factory=list)


def sample_until_valid(provider: LayoutProvider, prompt: str, max_attempts: int,
                       rules: Collection[str] = ALL_RULES) -> SamplingResult:
    """Draw candidates until one passes validation.

    Documents that fail to parse count as attempts with a single schema
    violation in their report.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    reports: list[ValidationReport] = []
    for attempt in range(1, max_attempts + 1):
        doc = provider.sample(prompt)
        try:
            plan = parse_layout(doc)
        except (SchemaError, InvariantError) as exc:
            ids = getattr(exc, "offending_ids", ()) or (getattr(exc, "path", "$"),)
            reports.append(ValidationReport((Violation("schema", str(exc), tuple(ids), False),)))
            continue
        report = validate_layout(plan, rules)
        reports.append(report)
        if report.valid:
            return SamplingResult(plan, attempt, reports)
    raise ExhaustedAttempts(reports)
