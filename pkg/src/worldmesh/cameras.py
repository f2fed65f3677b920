"""Pinhole cameras, per-room viewpoint sets, collision nudging and synthesis order.

Convention: quaternions are scalar-first (w, x, y, z) and rotate camera
coordinates into world coordinates. The camera's x axis points right, y up,
and it looks along its local -z. World +z is up.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from worldmesh.errors import InsetCollapse, NoFreeSpace, ZeroQuaternion
from worldmesh.floorplan import Room
from worldmesh.geom.distance import closest_point_on_triangles, distance_to_mesh
from worldmesh.geom.mesh import TriMesh
from worldmesh.geom.polygon import Polygon2D, inset_polygon, min_area_rectangle
from worldmesh.geom.raycast import raycast_batch

ROLES = ("bootstrap", "perimeter", "overhead")
DEFAULT_WIDTH = 1376
DEFAULT_HEIGHT = 768
DEFAULT_FOV_DEG = 60.0
PLACEMENT_FOV_DEG = 90.0
UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraConfig:
    eye_height: float = 1.60
    wall_offset: float = 0.30
    perimeter_count: int = 16
    min_spacing: float = 0.5  # perimeter count shrinks so spacing stays >= this
    overhead_count: int = 8
    overhead_height_fraction: float = 0.85
    overhead_pitch_deg: float = 25.0
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT
    fov_deg: float = DEFAULT_FOV_DEG

    def __post_init__(self):
        if not 0 < self.eye_height:
            raise ValueError("eye_height must be positive")
        if self.wall_offset <= 0 or self.perimeter_count < 1 or self.overhead_count < 0:
            raise ValueError("invalid perimeter parameters")
        if not 0 < self.overhead_height_fraction < 1:
            raise ValueError("overhead_height_fraction must lie in (0, 1)")
        if not 0 <= self.overhead_pitch_deg < 90:
            raise ValueError("overhead_pitch_deg must lie in [0, 90)")
        if self.width < 2 or self.height < 2 or not 0 < self.fov_deg < 180:
            raise ValueError("invalid image geometry")


# -- rotations ------------------------------------------------------------------

def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    for c in q:
        if c != 0:
            return q if c > 0 else -q
    return q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def matrix_to_quat(m) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(np.asarray(m, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    return _canonical(q / math.sqrt(w * w + x * x + y * y + z * z))


def look_rotation(forward) -> np.ndarray:
    """World-from-camera rotation whose -z axis is ``forward`` and x axis is level."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    r = np.cross(f, UP)
    if np.linalg.norm(r) < 1e-12:
        raise ValueError("forward direction is vertical; heading undefined")
    r /= np.linalg.norm(r)
    u = np.cross(r, f)
    return np.column_stack([r, u, -f])


def intrinsics(width: int, height: int, fov_deg: float) -> tuple[float, float, float, float]:
    """(fx, fy, cx, cy) for a horizontal field of view with square pixels."""
    fx = width / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
    return fx, fx, width / 2.0, height / 2.0


# -- camera ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Camera:
    position: np.ndarray
    quat: np.ndarray  # (w, x, y, z), world-from-camera
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    role: str = "perimeter"
    room_id: str = ""
    id: str = ""

    def __post_init__(self):
        pos = np.array(self.position, dtype=np.float64).reshape(3)
        q = np.array(self.quat, dtype=np.float64).reshape(4)
        pos.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "quat", q)
        if abs(float(np.linalg.norm(q)) - 1.0) > 1e-9:
            raise ValueError("camera quaternion must be unit length")
        if self.fx <= 0 or self.fy <= 0 or not 0 < self.cx < self.width or not 0 < self.cy < self.height:
            raise ValueError("invalid intrinsics")
        if self.role not in ROLES:
            raise ValueError(f"unknown camera role {self.role!r}")
        if self.role != "overhead" and self.forward[2] < -1e-9:
            raise ValueError("only overhead cameras may look downward")

    def __eq__(self, other) -> bool:
        return isinstance(other, Camera) and self.to_dict() == other.to_dict()

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation[:, 2]

    def world_to_camera(self, points) -> np.ndarray:
        return (np.atleast_2d(np.asarray(points, dtype=np.float64)) - self.position) @ self.rotation

    def camera_to_world(self, points) -> np.ndarray:
        return np.atleast_2d(np.asarray(points, dtype=np.float64)) @ self.rotation.T + self.position

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel coordinates (px, py) and depth (camera-space -z) of world points."""
        c = self.world_to_camera(points)
        d = -c[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = self.cx + self.fx * c[:, 0] / d
            py = self.cy - self.fy * c[:, 1] / d
        return px, py, d

    def pixel_directions(self, px, py) -> np.ndarray:
        """Unit world-space ray directions through pixel coordinates."""
        px, py = np.broadcast_arrays(np.asarray(px, float), np.asarray(py, float))
        local = np.stack([(px - self.cx) / self.fx, -(py - self.cy) / self.fy, -np.ones_like(px)], axis=-1)
        world = local @ self.rotation.T
        return world / np.linalg.norm(world, axis=-1, keepdims=True)

    def unproject(self, px, py, depth) -> np.ndarray:
        """World points at camera-space depth ``depth`` through pixel coordinates."""
        px, py, depth = np.broadcast_arrays(np.asarray(px, float), np.asarray(py, float), np.asarray(depth, float))
        local = np.stack([(px - self.cx) / self.fx * depth, -(py - self.cy) / self.fy * depth, -depth], axis=-1)
        return local @ self.rotation.T + self.position

    def with_image(self, width: int, height: int, fov_deg: float) -> "Camera":
        fx, fy, cx, cy = intrinsics(width, height, fov_deg)
        return replace(self, fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "room": self.room_id,
            "role": self.role,
            "position": [float(v) for v in self.position],
            "quat_wxyz": [float(v) for v in self.quat],
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "W": int(self.width), "H": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["position"]), np.array(d["quat_wxyz"]), d["fx"], d["fy"], d["cx"], d["cy"],
                   d["W"], d["H"], d["role"], d["room"], d.get("id", ""))


def make_camera(position, forward, *, role: str, room_id: str = "", cam_id: str = "",
                width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT, fov_deg: float = DEFAULT_FOV_DEG) -> Camera:
    fx, fy, cx, cy = intrinsics(width, height, fov_deg)
    return Camera(np.asarray(position, float), matrix_to_quat(look_rotation(forward)), fx, fy, cx, cy,
                  width, height, role, room_id, cam_id)


def cameras_to_jsonl(cameras: Iterable[Camera]) -> str:
    return "".join(json.dumps(c.to_dict(), sort_keys=True) + "\n" for c in cameras)


def cameras_from_jsonl(text: str) -> list[Camera]:
    return [Camera.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


# -- per-room placement -------------------------------------------------------------

def rectangle_surrogate(interior: Polygon2D) -> np.ndarray:
    """The interior itself when it is a rectangle, else its minimum-area rectangle."""
    pts = interior.vertices
    if len(pts) == 4:
        e = np.roll(pts, -1, axis=0) - pts
        e = e / np.linalg.norm(e, axis=1, keepdims=True)
        if np.all(np.abs((e * np.roll(e, -1, axis=0)).sum(axis=1)) < 1e-9):
            return pts.copy()
    return min_area_rectangle(interior)


def _heading_to(src_xy, dst_xy, pitch_rad: float = 0.0) -> np.ndarray:
    h = np.asarray(dst_xy, float) - np.asarray(src_xy, float)
    h = h / np.linalg.norm(h)
    return np.array([math.cos(pitch_rad) * h[0], math.cos(pitch_rad) * h[1], -math.sin(pitch_rad)])


def bootstrap_cameras(room: Room, interior: Polygon2D, cfg: CameraConfig = CameraConfig()) -> list[Camera]:
    """Two eye-level cameras on the midpoints of the rectangle's shorter sides.

    Each sits ``wall_offset`` inside its side and faces the interior centroid.
    With a square, the pair of sides containing side 0 is used.
    """
    rect = rectangle_surrogate(interior)
    center = interior.centroid()
    lengths = np.linalg.norm(np.roll(rect, -1, axis=0) - rect, axis=1)
    pair = (0, 2) if lengths[0] <= lengths[1] + 1e-9 else (1, 3)
    cams = []
    for k, i in enumerate(pair):
        a, b = rect[i], rect[(i + 1) % 4]
        mid = 0.5 * (a + b)
        d = (b - a) / np.linalg.norm(b - a)
        inward = np.array([-d[1], d[0]])
        if inward @ (center - mid) < 0:
            inward = -inward
        pos = mid + cfg.wall_offset * inward
        cams.append(make_camera([pos[0], pos[1], cfg.eye_height], _heading_to(pos, center), role="bootstrap",
                                room_id=room.id, cam_id=f"{room.id}/bootstrap/{k:02d}",
                                width=cfg.width, height=cfg.height, fov_deg=cfg.fov_deg))
    return cams


def perimeter_positions(ring: Polygon2D, count: int) -> np.ndarray:
    """``count`` points at uniform arc length along the ring, starting half a step in."""
    pts = ring.vertices
    seg = np.roll(pts, -1, axis=0) - pts
    lengths = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    total = cum[-1]
    out = []
    for k in range(count):
        s = (k + 0.5) * total / count
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(pts) - 1)
        out.append(pts[i] + (s - cum[i]) / lengths[i] * seg[i])
    return np.array(out).reshape(-1, 2)


def _ring(interior: Polygon2D, cfg: CameraConfig) -> Polygon2D:
    return inset_polygon(interior, cfg.wall_offset)


def perimeter_count(interior: Polygon2D, cfg: CameraConfig = CameraConfig()) -> int:
    perim = _ring(interior, cfg).perimeter
    if perim < cfg.perimeter_count * cfg.min_spacing:
        return max(1, int(perim // cfg.min_spacing))
    return cfg.perimeter_count


def perimeter_cameras(room: Room, interior: Polygon2D, cfg: CameraConfig = CameraConfig()) -> list[Camera]:
    """Eye-level cameras spread evenly around the wall-offset ring, facing the centroid."""
    ring = _ring(interior, cfg)
    center = interior.centroid()
    cams = []
    for k, p in enumerate(perimeter_positions(ring, perimeter_count(interior, cfg))):
        cams.append(make_camera([p[0], p[1], cfg.eye_height], _heading_to(p, center), role="perimeter",
                                room_id=room.id, cam_id=f"{room.id}/perimeter/{k:02d}",
                                width=cfg.width, height=cfg.height, fov_deg=cfg.fov_deg))
    return cams


def overhead_cameras(room: Room, interior: Polygon2D, cfg: CameraConfig = CameraConfig()) -> list[Camera]:
    """Elevated ring cameras pitched down toward the centroid."""
    ring = _ring(interior, cfg)
    center = interior.centroid()
    z = cfg.overhead_height_fraction * room.ceiling_height
    pitch = math.radians(cfg.overhead_pitch_deg)
    cams = []
    for k, p in enumerate(perimeter_positions(ring, cfg.overhead_count)):
        cams.append(make_camera([p[0], p[1], z], _heading_to(p, center, pitch), role="overhead",
                                room_id=room.id, cam_id=f"{room.id}/overhead/{k:02d}",
                                width=cfg.width, height=cfg.height, fov_deg=cfg.fov_deg))
    return cams


def room_cameras(room: Room, interior: Polygon2D, cfg: CameraConfig = CameraConfig()) -> list[Camera]:
    """Bootstrap pair, then perimeter ring, then overhead ring."""
    try:
        return bootstrap_cameras(room, interior, cfg) + perimeter_cameras(room, interior, cfg) + \
            overhead_cameras(room, interior, cfg)
    except InsetCollapse as exc:
        raise InsetCollapse(f"room {room.id} is too small for a {cfg.wall_offset} m camera offset") from exc


# -- collision nudging -------------------------------------------------------------

NUDGE_STEP = 0.01


def nudge_away_from_objects(cam: Camera, scene: TriMesh, clearance: float, look_at=None) -> Camera:
    """Move a camera horizontally away from the nearest object until clear.

    Candidate positions are sampled every 1 cm on the segment from the camera
    to the wall behind it (away from the object). The first sample clear of
    both objects and walls wins. If the wall is always within clearance but
    some sample clears the objects, the sample with the largest distance to
    either is used (the middle of the free gap). The heading is re-aimed at
    ``look_at`` (default: the point the camera currently faces at 1 m) and the
    pitch is kept.
    """
    objects = scene.category == "object"
    if not objects.any():
        return cam
    pos = cam.position
    dist, face = distance_to_mesh(pos[None], scene, face_mask=objects)
    if dist[0] >= clearance:
        return cam
    tri = scene.triangles[face[0]]
    nearest = closest_point_on_triangles(pos[None], tri[0][None], tri[1][None], tri[2][None])[0]
    away = pos - nearest
    away[2] = 0.0
    if np.linalg.norm(away) < 1e-9:
        away = -cam.forward.copy()
        away[2] = 0.0
    away /= np.linalg.norm(away)

    walls = scene.category != "object"
    t_wall, _ = raycast_batch(scene, pos, away, face_mask=walls)
    reach = float(t_wall[0]) if np.isfinite(t_wall[0]) else 0.0
    steps = np.arange(0.0, reach + 1e-12, NUDGE_STEP)
    if len(steps) == 0:
        raise NoFreeSpace(f"camera {cam.id}: no room to move")
    samples = pos + steps[:, None] * away
    d_obj, _ = distance_to_mesh(samples, scene, face_mask=objects)
    d_wall = reach - steps
    clear_obj = d_obj >= clearance
    if not clear_obj.any():
        raise NoFreeSpace(f"camera {cam.id}: objects within {clearance} m along the whole path")
    both = clear_obj & (d_wall >= clearance)
    k = int(np.argmax(both)) if both.any() else int(np.argmax(np.minimum(d_obj, d_wall)))
    new_pos = samples[k]

    fwd = cam.forward
    pitch = math.asin(max(-1.0, min(1.0, -fwd[2])))
    if look_at is None:
        look_at = pos + fwd
    forward = _heading_to(new_pos[:2], np.asarray(look_at, float)[:2], pitch)
    quat = matrix_to_quat(look_rotation(forward))
    return replace(cam, position=new_pos, quat=quat)


# -- scheduling --------------------------------------------------------------------

def _unit(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if n == 0.0 or not math.isfinite(n):
        raise ZeroQuaternion("quaternion has zero norm")
    return q / n


def quat_similarity(q1, q2) -> float:
    """Absolute dot product of the normalized quaternions (sign-invariant)."""
    a, b = _unit(q1), _unit(q2)
    return min(1.0, abs(float(a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3])))


@dataclass(frozen=True)
class SynthesisSchedule:
    order: tuple[int, ...]  # indices into the input camera list
    style_ref: tuple[int | None, ...]  # position in ``order`` of the reference, None for the first
    similarity: tuple[float, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.order)


def schedule_synthesis(cameras: Sequence[Camera] | Sequence[np.ndarray], bootstrap: Sequence[int]) -> SynthesisSchedule:
    """Greedy ordering by rotational closeness to anything already scheduled.

    The two bootstrap cameras come first. Each further step takes the
    unscheduled camera whose best similarity to a scheduled one is highest
    (lowest index on ties); its style reference is that best scheduled camera
    (earliest scheduled on ties).
    """
    quats = [_unit(c.quat if isinstance(c, Camera) else c) for c in cameras]
    n = len(quats)
    b = [int(i) for i in bootstrap]
    if len(b) != 2 or b[0] == b[1] or not all(0 <= i < n for i in b):
        raise ValueError("bootstrap must be two distinct valid indices")

    def sim(i, j):
        a, c = quats[i], quats[j]
        return min(1.0, abs(float(a[0] * c[0] + a[1] * c[1] + a[2] * c[2] + a[3] * c[3])))

    order = [b[0], b[1]]
    refs: list[int | None] = [None, 0]
    sims = [1.0, sim(b[1], b[0])]
    best = {j: (sim(j, b[0]), 0) for j in range(n) if j not in b}
    for j in best:
        s1 = sim(j, b[1])
        if s1 > best[j][0]:
            best[j] = (s1, 1)
    while best:
        pick = min(best, key=lambda j: (-best[j][0], j))
        score, ref = best.pop(pick)
        order.append(pick)
        refs.append(ref)
        sims.append(score)
        pos = len(order) - 1
        for j in best:
            s = sim(j, pick)
            if s > best[j][0]:
                best[j] = (s, pos)
    return SynthesisSchedule(tuple(order), tuple(refs), tuple(sims))


def schedule_to_dict(schedule: SynthesisSchedule, cameras: Sequence[Camera]) -> list[dict]:
    return [
        {"position": i, "camera": cameras[c].id,
         "style_ref": None if r is None else cameras[schedule.order[r]].id,
         "similarity": schedule.similarity[i] if schedule.similarity else None}
        for i, (c, r) in enumerate(zip(schedule.order, schedule.style_ref))
    ]


__all__ = [
    "Camera",
    "CameraConfig",
    "SynthesisSchedule",
    "bootstrap_cameras",
    "cameras_from_jsonl",
    "cameras_to_jsonl",
    "intrinsics",
    "look_rotation",
    "make_camera",
    "matrix_to_quat",
    "nudge_away_from_objects",
    "overhead_cameras",
    "perimeter_cameras",
    "quat_similarity",
    "quat_to_matrix",
    "rectangle_surrogate",
    "room_cameras",
    "schedule_synthesis",
]
