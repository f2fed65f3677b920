"""Placing reconstructed objects into the structural scene.

Objects arrive in a canonical frame with a pose into the frame of the camera
that observed them. Placement brings them into world space, classifies how
they rest (floor, flat, wall, ceiling), levels them with their bounding box,
settles them on a support found by vertical ray casting and finally pushes
overlapping floor-standing pieces apart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from worldmesh.cameras import Camera, quat_to_matrix
from worldmesh.errors import DegenerateObb, EmptyMesh, NoSupportFound, NoWallFound, WorldMeshError
from worldmesh.floorplan import FloorPlan, detect_shared_edges
from worldmesh.geom.mesh import TriMesh
from worldmesh.geom.obb import Obb, oriented_bounding_box
from worldmesh.geom.polygon import Polygon2D
from worldmesh.geom.raycast import raycast_batch
from worldmesh.gltf import read_glb
from worldmesh.structmesh import WallRun, interior_polygon, wall_runs

PLACEMENT_CLASSES = ("floor_standing", "flat", "wall_mounted", "ceiling_hung")
STACK_FRACTION = 0.25
OVERLAP_EPS = 1e-3  # m^2
MAX_CONFLICT_ITERATIONS = 32
FOOTPRINT_GRID = 7
CONTACT_INSET = 1e-3


# -- label table ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelTable:
    labels: Mapping[str, str]
    mount_heights: Mapping[str, float]
    default_class: str = "floor_standing"
    flat_aspect_ratio: float = 0.05
    flat_axis_min_abs_z: float = 0.985
    default_mount_height: float = 1.5

    @classmethod
    def from_dict(cls, doc: dict) -> "LabelTable":
        labels = {k.lower(): v for k, v in doc.get("labels", {}).items()}
        bad = sorted(set(labels.values()) - set(PLACEMENT_CLASSES))
        if bad:
            raise ValueError(f"unknown placement classes {bad}")
        return cls(labels, {k.lower(): float(v) for k, v in doc.get("mount_heights", {}).items()},
                   doc.get("default_class", "floor_standing"), float(doc.get("flat_aspect_ratio", 0.05)),
                   float(doc.get("flat_axis_min_abs_z", 0.985)), float(doc.get("default_mount_height", 1.5)))

    @classmethod
    def default(cls) -> "LabelTable":
        text = resources.files("worldmesh").joinpath("resources/placement_labels.json").read_text()
        return cls.from_dict(json.loads(text))

    def mount_height(self, label: str) -> float:
        return self.mount_heights.get(label.strip().lower(), self.default_mount_height)


# -- data types ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReconstructedObject:
    object_id: str
    label: str
    mesh: TriMesh  # canonical object frame
    rotation: np.ndarray  # object -> camera frame
    translation: np.ndarray
    source_camera: Camera

    def __post_init__(self):
        if self.mesh.n_faces == 0:
            raise EmptyMesh(f"object {self.object_id!r} has no faces")
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or np.linalg.det(r) < 0:
            raise ValueError(f"object {self.object_id!r}: pose rotation is not a proper rotation")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))


@dataclass(frozen=True, eq=False)
class PlacedObject:
    object_id: str
    label: str
    room: str
    mesh: TriMesh  # world frame, tagged as this object
    placement_class: str
    support_id: str  # "floor", "ceiling", a wall surface id or another object's id
    flagged: bool = False

    @property
    def footprint(self) -> np.ndarray:
        """XY bounding rectangle [[xmin, ymin], [xmax, ymax]]."""
        b = self.mesh.bounds()
        return b[:, :2]

    @property
    def footprint_area(self) -> float:
        lo, hi = self.footprint
        return float(np.prod(hi - lo))

    def moved(self, offset) -> "PlacedObject":
        return replace(self, mesh=self.mesh.transformed(translation=offset))


@dataclass
class PlacementReport:
    room: str
    placed: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    unresolved_pairs: list[tuple[str, str]] = field(default_factory=list)
    conflict_iterations: int = 0
    overlap_before: float = 0.0
    overlap_after: float = 0.0

    def to_dict(self) -> dict:
        return {"room": self.room, "placed": self.placed, "skipped": self.skipped,
                "unresolved_pairs": [list(p) for p in self.unresolved_pairs],
                "conflict_iterations": self.conflict_iterations,
                "overlap_before": self.overlap_before, "overlap_after": self.overlap_after}


# -- transforms ------------------------------------------------------------------------------

def to_world(obj: ReconstructedObject) -> TriMesh:
    """Canonical mesh -> camera frame (object pose) -> world (camera extrinsics)."""
    cam = obj.source_camera
    rot = cam.rotation @ obj.rotation
    trans = cam.rotation @ obj.translation + cam.position
    return obj.mesh.transformed(rot, trans)


def object_from_world_pose(object_id: str, label: str, mesh: TriMesh, rotation, translation,
                           cam: Camera) -> ReconstructedObject:
    """Express a world pose in ``cam``'s frame, the form a reconstruction model reports."""
    r_cam = cam.rotation
    rot = r_cam.T @ np.asarray(rotation, dtype=np.float64)
    trans = r_cam.T @ (np.asarray(translation, dtype=np.float64) - cam.position)
    return ReconstructedObject(object_id, label, mesh, rot, trans, cam)


def classify_placement(label: str, obb: Obb, table: LabelTable | None = None) -> str:
    """Label table first; otherwise very thin boxes lying flat count as ``flat``."""
    table = table or LabelTable.default()
    key = label.strip().lower()
    if key in table.labels:
        return table.labels[key]
    he = np.asarray(obb.half_extents, dtype=np.float64)
    if he.max() > 0:
        k = int(np.argmin(he))
        if he[k] / he.max() < table.flat_aspect_ratio and abs(obb.axes[k][2]) >= table.flat_axis_min_abs_z:
            return "flat"
    return table.default_class


def _rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector a onto unit vector b."""
    v = np.cross(a, b)
    c = float(a @ b)
    s = float(np.linalg.norm(v))
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    k = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + k + k @ k * ((1 - c) / s**2)


def level_rotation(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray, Obb]:
    """(rotation, pivot, obb): the minimal rotation turning the most downward OBB face to face -z."""
    try:
        obb = oriented_bounding_box(mesh)
    except EmptyMesh as exc:
        raise DegenerateObb(str(exc)) from exc
    he = np.sort(obb.half_extents)
    if he[1] <= 1e-9 or not np.isfinite(obb.axes).all():
        raise DegenerateObb("bounding box collapses to a line or a point")
    normals = obb.face_normals()
    bottom = normals[int(np.argmin(normals[:, 2]))]
    return _rotation_between(bottom, np.array([0.0, 0.0, -1.0])), obb.center, obb


def level_to_ground(mesh: TriMesh) -> TriMesh:
    rot, pivot, _ = level_rotation(mesh)
    return mesh.transformed(rot, pivot - rot @ pivot)


# -- supports ----------------------------------------------------------------------------------

def _footprint_samples(mesh: TriMesh, grid: int = FOOTPRINT_GRID) -> np.ndarray:
    lo, hi = mesh.bounds()[:, :2]
    inset = np.minimum(CONTACT_INSET, (hi - lo) / 4)
    xs = np.linspace(lo[0] + inset[0], hi[0] - inset[0], grid)
    ys = np.linspace(lo[1] + inset[1], hi[1] - inset[1], grid)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def rect_overlap(a: np.ndarray, b: np.ndarray) -> float:
    """Area of intersection of two [[xmin, ymin], [xmax, ymax]] rectangles."""
    w = min(a[1, 0], b[1, 0]) - max(a[0, 0], b[0, 0])
    h = min(a[1, 1], b[1, 1]) - max(a[0, 1], b[0, 1])
    return float(max(w, 0.0) * max(h, 0.0))


def drop_to_support(mesh: TriMesh, scene: TriMesh, direction: str = "down",
                    stack_on: Sequence[str] | None = None) -> tuple[TriMesh, str]:
    """Translate vertically until the mesh rests on the nearest support.

    Downward, supports are floor faces plus faces of the objects in
    ``stack_on`` (default: any object in ``scene``); rays start at the top of
    the mesh so a piece sunk slightly into a table still lands on it. Upward,
    only ceiling faces count. Returns the moved mesh and the support id.
    """
    if direction not in ("down", "up"):
        raise ValueError("direction must be 'down' or 'up'")
    lo, hi = mesh.bounds()
    xy = _footprint_samples(mesh)
    if direction == "down":
        mask = scene.category == "floor"
        if stack_on is None:
            mask |= scene.category == "object"
        elif len(stack_on):
            mask |= (scene.category == "object") & np.isin(scene.object_id, list(stack_on))
        origins = np.column_stack([xy, np.full(len(xy), hi[2])])
        dirs = np.tile([0.0, 0.0, -1.0], (len(xy), 1))
    else:
        mask = scene.category == "ceiling"
        origins = np.column_stack([xy, np.full(len(xy), lo[2])])
        dirs = np.tile([0.0, 0.0, 1.0], (len(xy), 1))
    t, face = raycast_batch(scene, origins, dirs, face_mask=mask)
    hit = np.isfinite(t)
    if not hit.any():
        raise NoSupportFound(f"no support surface {direction} from the object footprint")
    z = origins[hit, 2] + t[hit] * dirs[hit, 2]
    k = int(np.argmax(z)) if direction == "down" else int(np.argmin(z))
    f = face[hit][k]
    support = str(scene.object_id[f]) if scene.category[f] == "object" else str(scene.category[f])
    dz = z[k] - (lo[2] if direction == "down" else hi[2])
    return mesh.transformed(translation=[0.0, 0.0, dz]), support


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    t = np.clip((p - a) @ ab / max(ab @ ab, 1e-300), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def attach_to_wall(mesh: TriMesh, walls: Sequence[WallRun], mount_height: float = 1.5) -> tuple[TriMesh, str]:
    """Slide the mesh onto the nearest wall's room-side face, centered at ``mount_height``.

    The nearest wall is measured from the bounding-box center in plan; exact
    ties go to the lower run index. Returns the moved mesh and the wall's
    surface id.
    """
    runs = [r for r in walls if np.linalg.norm(r.inner[1] - r.inner[0]) > 1e-9]
    if not runs:
        raise NoWallFound("room has no wall faces")
    lo, hi = mesh.bounds()
    center = (lo + hi) / 2
    dists = [_segment_distance(center[:2], r.inner[0], r.inner[1]) for r in runs]
    best = min(range(len(runs)), key=lambda i: (dists[i], runs[i].index))
    run = runs[best]
    n = np.asarray(run.inward, dtype=np.float64)
    back = float(((mesh.vertices[:, :2] - run.inner[0]) @ n).min())
    offset = np.array([-back * n[0], -back * n[1], mount_height - center[2]])
    return mesh.transformed(translation=offset), run.surface


def clamp_inside(mesh: TriMesh, inner: Polygon2D, max_iter: int = 8) -> TriMesh:
    """Shift horizontally so no vertex lies outside the room-side outline (wall faces)."""
    n_in = inner.inward_normals()
    for _ in range(max_iter):
        pts = mesh.vertices[:, :2]
        outside = ~inner.contains(pts)
        if not outside.any():
            break
        shift = np.zeros(2)
        for i in range(len(inner)):
            a, _ = inner.edge(i)
            depth = -((pts[outside] - a) @ n_in[i])
            pen = depth.max(initial=0.0)
            if pen > 0:
                shift += (pen + 1e-9) * n_in[i]
        if not shift.any():
            break
        mesh = mesh.transformed(translation=[shift[0], shift[1], 0.0])
    return mesh


# -- conflicts ---------------------------------------------------------------------------------

def total_overlap(objects: Sequence[PlacedObject]) -> float:
    fps = [o.footprint for o in objects]
    return float(sum(rect_overlap(fps[i], fps[j]) for i in range(len(fps)) for j in range(i + 1, len(fps))))


def _participants(objects: Sequence[PlacedObject]) -> list[int]:
    """Floor-standing objects at floor level: on the floor or on a flat object such as a rug."""
    flat = {o.object_id for o in objects if o.placement_class == "flat"}
    return [i for i, o in enumerate(objects)
            if o.placement_class == "floor_standing" and (o.support_id == "floor" or o.support_id in flat)]


def _clearing_distance(big: np.ndarray, small: np.ndarray, d: np.ndarray) -> float:
    """Travel along d after which the small rectangle no longer overlaps the big one."""
    c_big, c_small = big.mean(axis=0), small.mean(axis=0)
    half = (big[1] - big[0]) / 2 + (small[1] - small[0]) / 2
    best = np.inf
    for k in range(2):
        rate = abs(d[k])
        if rate < 1e-12:
            continue
        need = half[k] - abs(c_small[k] - c_big[k])
        best = min(best, max(need, 0.0) / rate)
    return best


def _max_travel(rect: np.ndarray, d: np.ndarray, inner: Polygon2D, limit: float) -> float:
    """Largest t <= limit keeping the rectangle's corners inside the outline (bisection)."""
    corners = np.array([[rect[0, 0], rect[0, 1]], [rect[1, 0], rect[0, 1]],
                        [rect[1, 0], rect[1, 1]], [rect[0, 0], rect[1, 1]]])

    def ok(t):
        return bool(inner.contains(corners + t * d).all())

    if ok(limit):
        return limit
    if not ok(0.0):
        return 0.0
    lo, hi = 0.0, limit
    for _ in range(40):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo


def resolve_conflicts(objects: Sequence[PlacedObject], inner: Polygon2D,
                      max_iter: int = MAX_CONFLICT_ITERATIONS) -> tuple[list[PlacedObject], list[tuple[str, str]], int]:
    """Push overlapping floor-standing objects apart, toward the walls.

    Pairs are visited in descending footprint area (index order on ties).
    The smaller object of an overlapping pair moves along the ray from the
    larger one's center through its own, far enough to clear the overlap or
    until it reaches the room outline. A move is kept only if the summed
    pairwise overlap does not grow. Returns the objects, the pairs still
    overlapping (flagged) and the number of passes used.
    """
    objs = list(objects)
    members = _participants(objs)
    order = sorted(members, key=lambda i: (-objs[i].footprint_area, i))
    passes = 0
    for passes in range(1, max_iter + 1):
        changed = False
        for a_pos, i in enumerate(order):
            for j in order[a_pos + 1:]:
                big, small = objs[i].footprint, objs[j].footprint
                if rect_overlap(big, small) <= OVERLAP_EPS:
                    continue
                d = small.mean(axis=0) - big.mean(axis=0)
                if np.linalg.norm(d) < 1e-9:
                    # concentric: head for the nearest wall
                    c = small.mean(axis=0)
                    k = int(np.argmin([_segment_distance(c, *inner.edge(e)) for e in range(len(inner))]))
                    d = -inner.inward_normals()[k]
                d = d / np.linalg.norm(d)
                need = _clearing_distance(big, small, d) + 1e-6
                t = _max_travel(small, d, inner, need)
                if t <= 1e-9:
                    continue
                trial = objs.copy()
                trial[j] = objs[j].moved([t * d[0], t * d[1], 0.0])
                sub_before = total_overlap([objs[m] for m in members])
                sub_after = total_overlap([trial[m] for m in members])
                if sub_after <= sub_before:
                    objs = trial
                    changed = True
        if not changed:
            break
    unresolved = []
    for a_pos, i in enumerate(order):
        for j in order[a_pos + 1:]:
            if rect_overlap(objs[i].footprint, objs[j].footprint) > OVERLAP_EPS:
                objs[i] = replace(objs[i], flagged=True)
                objs[j] = replace(objs[j], flagged=True)
                unresolved.append((objs[i].object_id, objs[j].object_id))
    return objs, unresolved, passes


# -- full placement --------------------------------------------------------------------------------

def place_object(obj: ReconstructedObject, room_id: str, scene: TriMesh, walls: Sequence[WallRun],
                 inner: Polygon2D, placed: Sequence[PlacedObject], table: LabelTable) -> PlacedObject:
    world = to_world(obj).with_tags(room=room_id, category="object", object_id=obj.object_id, surface="")
    cls = classify_placement(obj.label, oriented_bounding_box(world), table)
    if cls == "wall_mounted":
        world, support = attach_to_wall(world, walls, table.mount_height(obj.label))
        return PlacedObject(obj.object_id, obj.label, room_id, world, cls, support)
    world = level_to_ground(world)
    world = clamp_inside(world, inner)
    if cls == "ceiling_hung":
        world, support = drop_to_support(world, scene, "up")
    else:
        fp = world.bounds()[:, :2]
        area = float(np.prod(fp[1] - fp[0]))
        stack = [p.object_id for p in placed
                 if rect_overlap(fp, p.footprint) >= STACK_FRACTION * min(area, p.footprint_area)]
        world, support = drop_to_support(world, scene, "down", stack_on=stack)
    return PlacedObject(obj.object_id, obj.label, room_id, world, cls, support)


def place_room_objects(plan: FloorPlan, room_id: str, struct_mesh: TriMesh,
                       objects: Sequence[ReconstructedObject], table: LabelTable | None = None,
                       shared=None) -> tuple[list[PlacedObject], PlacementReport]:
    """Sequential placement of one room's objects; failures are reported and skipped."""
    table = table or LabelTable.default()
    shared = detect_shared_edges(plan) if shared is None else shared
    room = plan.room(room_id)
    walls = wall_runs(room, plan.wall_thickness, shared)
    inner = interior_polygon(room, plan.wall_thickness, shared)
    report = PlacementReport(room_id)
    placed: list[PlacedObject] = []
    for obj in objects:
        scene = TriMesh.merge([struct_mesh, *(p.mesh for p in placed)])
        try:
            placed.append(place_object(obj, room_id, scene, walls, inner, placed, table))
        except WorldMeshError as exc:
            report.skipped.append({"object_id": obj.object_id, "label": obj.label,
                                   "error": type(exc).__name__, "message": str(exc)})
    report.overlap_before = total_overlap([placed[i] for i in _participants(placed)])
    placed, unresolved, passes = resolve_conflicts(placed, inner)
    report.overlap_after = total_overlap([placed[i] for i in _participants(placed)])
    report.unresolved_pairs = unresolved
    report.conflict_iterations = passes
    report.placed = [{"object_id": p.object_id, "label": p.label, "placement_class": p.placement_class,
                      "support_id": p.support_id, "flagged": p.flagged,
                      "bounds": np.round(p.mesh.bounds(), 9).tolist()} for p in placed]
    return placed, report


def build_m_geo(plan: FloorPlan, struct_mesh: TriMesh,
                objects_by_room: Mapping[str, Sequence[ReconstructedObject]],
                table: LabelTable | None = None) -> tuple[TriMesh, list[PlacementReport]]:
    """Structural mesh plus every placed object, rooms in plan order."""
    shared = detect_shared_edges(plan)
    parts = [struct_mesh]
    reports = []
    for room in plan.rooms:
        objs = objects_by_room.get(room.id, ())
        if not objs:
            continue
        placed, report = place_room_objects(plan, room.id, struct_mesh, objs, table, shared)
        parts.extend(p.mesh for p in placed)
        reports.append(report)
    return TriMesh.merge(parts), reports


# -- object files --------------------------------------------------------------------------------

def load_object_glb(path, object_id: str) -> TriMesh:
    """Mesh with texture coordinates (v up) and the first embedded texture of a GLB file."""
    _, prims = read_glb(path)
    parts = []
    image = None
    for p in prims:
        uv = None
        if p.uv is not None:
            uv = np.column_stack([p.uv[:, 0], 1.0 - p.uv[:, 1]]).astype(np.float64)
            image = p.image if image is None else image
        parts.append(TriMesh.from_arrays(p.positions, p.indices, uv=uv, category="object",
                                         object_id=object_id, drop_degenerate=False))
    mesh = TriMesh.merge(parts)
    return mesh.with_textures({object_id: image} if image is not None else {})


def load_object_manifest(directory, cameras: Mapping[str, Camera]) -> dict[str, list[ReconstructedObject]]:
    """Read ``objects.json`` entries {object_id, label, room, source_camera_id, pose, mesh} from a directory."""
    d = Path(directory)
    doc = json.loads((d / "objects.json").read_text())
    out: dict[str, list[ReconstructedObject]] = {}
    for entry in doc["objects"]:
        cam = cameras[entry["source_camera_id"]]
        mesh = load_object_glb(d / entry["mesh"], entry["object_id"])
        rot = quat_to_matrix(entry["pose"]["quat_wxyz"])
        room = entry.get("room", cam.room_id)
        out.setdefault(room, []).append(
            ReconstructedObject(entry["object_id"], entry["label"], mesh, rot, entry["pose"]["translation"], cam))
    return out
