"""Projective texture accumulation onto structural surfaces.

Every wall run, floor and ceiling owns a planar chart: a texel grid over an
axis-aligned rectangle in the surface plane. Generated images are projected
onto the texels that pass four filters (facing, unoccluded, same room, inside
the image); a texel keeps the color from the view that saw it most head-on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image
from scipy import ndimage

from worldmesh.cameras import Camera
from worldmesh.errors import BehindCamera, DimensionMismatch
from worldmesh.floorplan import FloorPlan, detect_shared_edges
from worldmesh.geom.mesh import TriMesh
from worldmesh.render import DepthMap
from worldmesh.geom.polygon import Polygon2D
from worldmesh.structmesh import interior_polygon, wall_runs

TEXELS_PER_METER = 64.0
OCCLUSION_TOLERANCE = 0.10
PLANE_TOLERANCE = 1e-3
NORMAL_ALIGNMENT = 0.999
UNSEEN_GRAY = 128


@dataclass(eq=False)
class Chart:
    """Texel grid over ``origin + u*u_axis + v*v_axis`` for u in [0, width_m], v in [0, height_m].

    Row ``r`` of the grid holds texels with v in [r, r+1) / texels_per_meter
    scaled to the rectangle, so row 0 is the bottom (floor side) of a wall.
    """

    surface_id: str
    room: str
    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    normal: np.ndarray  # side of the surface facing into the room
    width_m: float
    height_m: float
    texels_per_meter: float
    mask: np.ndarray  # (nv, nu) texels that lie on real surface
    rgb: np.ndarray = None  # (nv, nu, 3) uint8
    confidence: np.ndarray = None  # (nv, nu) in [0, 1]; 0 means never written
    best_cos: np.ndarray = None  # (nv, nu) incidence cosine of the winning view

    def __post_init__(self):
        for name in ("origin", "u_axis", "v_axis", "normal"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        shape = self.mask.shape
        if self.rgb is None:
            self.rgb = np.zeros(shape + (3,), dtype=np.uint8)
        if self.confidence is None:
            self.confidence = np.zeros(shape)
        if self.best_cos is None:
            self.best_cos = np.zeros(shape)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def texel_centers(self) -> np.ndarray:
        """World positions of every texel center, shape (nv, nu, 3)."""
        nv, nu = self.shape
        u = (np.arange(nu) + 0.5) * (self.width_m / nu)
        v = (np.arange(nv) + 0.5) * (self.height_m / nv)
        return (self.origin + u[None, :, None] * self.u_axis + v[:, None, None] * self.v_axis)

    def chart_coords(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(u, v, plane offset) in meters for world points."""
        rel = np.asarray(points, dtype=np.float64) - self.origin
        return rel @ self.u_axis, rel @ self.v_axis, rel @ self.normal

    def texel_index(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        nv, nu = self.shape
        col = np.floor(u / self.width_m * nu).astype(np.int64)
        row = np.floor(v / self.height_m * nv).astype(np.int64)
        ok = (col >= 0) & (col < nu) & (row >= 0) & (row < nv)
        return row, col, ok

    def copy(self) -> "Chart":
        return replace(self, rgb=self.rgb.copy(), confidence=self.confidence.copy(), best_cos=self.best_cos.copy())


def _grid_size(length: float, density: float) -> int:
    return max(1, int(round(length * density)))


@dataclass(eq=False)
class TextureAtlas:
    charts: dict[str, Chart] = field(default_factory=dict)
    texels_per_meter: float = TEXELS_PER_METER

    def copy(self) -> "TextureAtlas":
        return TextureAtlas({k: c.copy() for k, c in self.charts.items()}, self.texels_per_meter)

    def coverage(self) -> int:
        return int(sum((c.confidence > 0).sum() for c in self.charts.values()))

    def room_coverage(self, room: str) -> int:
        return int(sum((c.confidence > 0).sum() for c in self.charts.values() if c.room == room))

    def lookup(self, surfaces, points, normals) -> tuple[np.ndarray, np.ndarray]:
        """Color in [0,1] and confidence for surface points; confidence 0 where no texel applies.

        A point maps to its surface's chart only when it lies on the chart
        plane and its face normal matches the chart normal, so wall ends, outer
        faces and opening reveals stay untextured.
        """
        surfaces = np.asarray(surfaces)
        groups = ((str(sid), np.flatnonzero(surfaces == sid)) for sid in np.unique(surfaces))
        return self.lookup_groups(groups, points, normals)

    def lookup_groups(self, groups, points, normals) -> tuple[np.ndarray, np.ndarray]:
        """``lookup`` with the points already grouped as (surface id, indices) pairs."""
        points = np.asarray(points, dtype=np.float64)
        normals = np.asarray(normals, dtype=np.float64)
        color = np.zeros((len(points), 3))
        conf = np.zeros(len(points))
        for sid, idx in groups:
            chart = self.charts.get(sid)
            if chart is None:
                continue
            u, v, off = chart.chart_coords(points[idx])
            row, col, ok = chart.texel_index(u, v)
            ok &= (np.abs(off) <= PLANE_TOLERANCE) & (normals[idx] @ chart.normal >= NORMAL_ALIGNMENT)
            idx, row, col = idx[ok], row[ok], col[ok]
            keep = chart.mask[row, col]
            idx, row, col = idx[keep], row[keep], col[keep]
            color[idx] = chart.rgb[row, col] / 255.0
            conf[idx] = chart.confidence[row, col]
        return color, conf

    # -- GLB baking ---------------------------------------------------------------
    def bake(self, mesh: TriMesh, sel: np.ndarray):
        """Un-indexed triangles, glTF UVs and one stacked texture for faces ``sel``.

        Faces that lie on a chart get chart UVs; every other face samples a
        one-texel gray strip appended below the charts. Returns None when no
        face of the selection lies on a chart.
        """
        sel = np.asarray(sel)
        tris = mesh.triangles[sel]
        normals = mesh.face_normals()[sel]
        surf = mesh.surface[sel]
        on_chart = np.zeros(len(sel), dtype=bool)
        used: list[str] = []
        for sid in np.unique(surf):
            chart = self.charts.get(str(sid))
            if chart is None:
                continue
            idx = np.flatnonzero(surf == sid)
            _, _, off = chart.chart_coords(tris[idx].reshape(-1, 3))
            flat = (np.abs(off.reshape(-1, 3)) <= PLANE_TOLERANCE).all(axis=1)
            hit = flat & (normals[idx] @ chart.normal >= NORMAL_ALIGNMENT)
            if hit.any():
                on_chart[idx[hit]] = True
                used.append(str(sid))
        if not used:
            return None
        width = max(self.charts[s].shape[1] for s in used)
        blocks, tops, y = [], {}, 0
        for sid in used:
            c = self.charts[sid]
            img = np.where((c.confidence > 0)[..., None], c.rgb, UNSEEN_GRAY).astype(np.uint8)[::-1]
            pad = np.full((c.shape[0], width, 3), UNSEEN_GRAY, dtype=np.uint8)
            pad[:, :c.shape[1]] = img
            blocks.append(pad)
            tops[sid] = y
            y += c.shape[0]
        blocks.append(np.full((1, width, 3), UNSEEN_GRAY, dtype=np.uint8))
        image = np.concatenate(blocks)
        total = image.shape[0]
        uv = np.empty((len(sel), 3, 2))
        uv[:] = [0.5 / width, (total - 0.5) / total]  # gray strip
        for sid in used:
            c = self.charts[sid]
            idx = np.flatnonzero(on_chart & (surf == sid))
            u, v, _ = c.chart_coords(tris[idx].reshape(-1, 3))
            nv, nu = c.shape
            x = u / c.width_m * nu
            yy = tops[sid] + (nv - v / c.height_m * nv)
            uv[idx] = np.column_stack([x / width, yy / total]).reshape(-1, 3, 2)
        return tris.reshape(-1, 3), uv.reshape(-1, 2), image

    # -- persistence ------------------------------------------------------------------
    def save(self, directory) -> Path:
        """One RGB PNG and one 8-bit confidence PNG per chart, a JSON manifest and an exact state file."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = []
        state = {}
        for k, (sid, c) in enumerate(sorted(self.charts.items())):
            stem = sid.replace("/", "__")
            Image.fromarray(c.rgb[::-1]).save(d / f"{stem}.png", format="PNG")
            conf8 = np.round(c.confidence * 255).astype(np.uint8)
            Image.fromarray(conf8[::-1]).save(d / f"{stem}_confidence.png", format="PNG")
            manifest.append({
                "surface_id": sid, "room": c.room, "origin": c.origin.tolist(),
                "u_axis": c.u_axis.tolist(), "v_axis": c.v_axis.tolist(), "normal": c.normal.tolist(),
                "width_m": c.width_m, "height_m": c.height_m, "texels_per_meter": c.texels_per_meter,
                "shape": list(c.shape), "image": f"{stem}.png", "confidence": f"{stem}_confidence.png",
            })
            state[f"mask_{k}"] = c.mask
            state[f"conf_{k}"] = c.confidence
            state[f"cos_{k}"] = c.best_cos
        path = d / "atlas.json"
        path.write_text(json.dumps({"texels_per_meter": self.texels_per_meter, "charts": manifest}, indent=2))
        with open(d / "atlas_state.npz", "wb") as fh:
            np.savez_compressed(fh, **state)
        return path

    @classmethod
    def load(cls, directory) -> "TextureAtlas":
        d = Path(directory)
        doc = json.loads((d / "atlas.json").read_text())
        state = np.load(d / "atlas_state.npz")
        charts = {}
        for k, m in enumerate(doc["charts"]):
            rgb = np.asarray(Image.open(d / m["image"]).convert("RGB"))[::-1].copy()
            charts[m["surface_id"]] = Chart(
                m["surface_id"], m["room"], m["origin"], m["u_axis"], m["v_axis"], m["normal"],
                m["width_m"], m["height_m"], m["texels_per_meter"], state[f"mask_{k}"].copy(),
                rgb, state[f"conf_{k}"].copy(), state[f"cos_{k}"].copy())
        return cls(charts, doc["texels_per_meter"])


# -- construction ---------------------------------------------------------------------------

def _floor_chart(room, inner: Polygon2D, surface: str, z: float, normal_z: float, density: float) -> Chart:
    """Chart over the floor polygon's bounding rectangle; texels outside the room-side outline are masked."""
    lo, hi = room.floor_polygon.vertices.min(axis=0), room.floor_polygon.vertices.max(axis=0)
    w, h = float(hi[0] - lo[0]), float(hi[1] - lo[1])
    nu, nv = _grid_size(w, density), _grid_size(h, density)
    u = lo[0] + (np.arange(nu) + 0.5) * (w / nu)
    v = lo[1] + (np.arange(nv) + 0.5) * (h / nv)
    gx, gy = np.meshgrid(u, v)
    mask = inner.contains(np.column_stack([gx.ravel(), gy.ravel()])).reshape(nv, nu)
    return Chart(surface, room.id, [lo[0], lo[1], z], [1, 0, 0], [0, 1, 0], [0, 0, normal_z],
                 w, h, density, mask)


def build_atlas(plan: FloorPlan, texels_per_meter: float = TEXELS_PER_METER) -> TextureAtlas:
    """Empty charts for every wall run, floor and ceiling of the plan.

    Wall charts start at the run's room-side start point on the floor, with
    u along the run and v up; texels inside openings are masked out.
    """
    shared = detect_shared_edges(plan)
    charts: dict[str, Chart] = {}
    for room in plan.rooms:
        for run in wall_runs(room, plan.wall_thickness, shared):
            a2, b2 = run.inner
            length = float((b2 - a2) @ run.direction)
            nu, nv = _grid_size(length, texels_per_meter), _grid_size(run.height, texels_per_meter)
            origin = np.array([a2[0], a2[1], 0.0])
            u_axis = np.array([run.direction[0], run.direction[1], 0.0])
            chart = Chart(run.surface, room.id, origin, u_axis, [0, 0, 1],
                          [run.inward[0], run.inward[1], 0.0], length, run.height, texels_per_meter,
                          np.ones((nv, nu), dtype=bool))
            centers = chart.texel_centers()
            edge_a, edge_u, _ = room.edge_frame(run.edge)
            s = (centers[..., :2] - edge_a) @ edge_u
            z = centers[..., 2]
            for op in room.openings:
                if op.edge != run.edge:
                    continue
                hole = (s > op.offset) & (s < op.offset + op.width) & (z > op.sill) & (z < op.head)
                chart.mask &= ~hole
            charts[run.surface] = chart
        inner = interior_polygon(room, plan.wall_thickness, shared)
        charts[f"{room.id}/floor"] = _floor_chart(room, inner, f"{room.id}/floor", 0.0, 1.0, texels_per_meter)
        charts[f"{room.id}/ceiling"] = _floor_chart(room, inner, f"{room.id}/ceiling", room.ceiling_height, -1.0,
                                                    texels_per_meter)
    return TextureAtlas(charts, texels_per_meter)


# -- projection ---------------------------------------------------------------------------------

def vertex_uv(point, cam: Camera) -> tuple[float, float] | None:
    """Texture coordinates (px/W, 1 - py/H) of a world point, None outside the image."""
    px, py, d = cam.project(np.asarray(point, dtype=np.float64).reshape(1, 3))
    if not d[0] > 0:
        raise BehindCamera("point is not in front of the camera")
    px, py = float(px[0]), float(py[0])
    if not (0.0 <= px <= cam.width and 0.0 <= py <= cam.height):
        return None
    return px / cam.width, 1.0 - py / cam.height


def project_image(scene: TriMesh | None, cam: Camera, image: np.ndarray, depth: DepthMap, room_id: str,
                  atlas: TextureAtlas, tau: float = OCCLUSION_TOLERANCE) -> TextureAtlas:
    """Return a new atlas with ``image`` projected onto ``room_id``'s visible texels.

    Filters per texel: faces the camera, projects inside the image, texel
    depth within ``tau`` of the scaffold depth there, and belongs to the
    room. The occlusion test is also checked against the nearest depth in
    the 3x3 pixel neighbourhood, so texels grazing a foreground silhouette
    are rejected rather than picking up the foreground color. A passing texel takes the image color only when this view's
    incidence cosine beats the stored one; its confidence becomes that cosine.
    Charts of other rooms are shared with the input atlas untouched.
    """
    image = np.asarray(image)
    dvals = depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    if image.shape[:2] != (cam.height, cam.width) or dvals.shape != (cam.height, cam.width):
        raise DimensionMismatch(f"image {image.shape[:2]} and depth {dvals.shape} must be "
                                f"{(cam.height, cam.width)}")
    nearest = ndimage.minimum_filter(dvals, size=3, mode="nearest")
    present = None if scene is None else set(np.unique(scene.surface).tolist())
    out = TextureAtlas(dict(atlas.charts), atlas.texels_per_meter)
    for sid, chart in atlas.charts.items():
        if chart.room != room_id or (present is not None and sid not in present):
            continue
        centers = chart.texel_centers().reshape(-1, 3)
        view = cam.position - centers
        dist = np.linalg.norm(view, axis=1)
        cosine = (view @ chart.normal) / np.maximum(dist, 1e-12)
        ok = chart.mask.ravel() & (cosine > 0)
        if not ok.any():
            continue
        px, py, d = cam.project(centers)
        ok &= (d > 0) & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        idx = np.flatnonzero(ok)
        col = np.floor(px[idx]).astype(np.int64)
        row = np.floor(py[idx]).astype(np.int64)
        scaffold = dvals[row, col]
        vis = np.isfinite(scaffold) & (np.abs(d[idx] - scaffold) <= tau) & (d[idx] <= nearest[row, col] + tau)
        idx, row, col = idx[vis], row[vis], col[vis]
        better = cosine[idx] > chart.best_cos.ravel()[idx]
        idx, row, col = idx[better], row[better], col[better]
        if not len(idx):
            continue
        new = chart.copy()
        new.rgb.reshape(-1, 3)[idx] = image[row, col, :3]
        new.best_cos.ravel()[idx] = cosine[idx]
        new.confidence.ravel()[idx] = cosine[idx]
        out.charts[sid] = new
    return out


def accumulate_views(scene: TriMesh | None, views: Iterable[tuple[Camera, np.ndarray, DepthMap]],
                     atlas: TextureAtlas, room_id: str | None = None) -> TextureAtlas:
    """Fold ``project_image`` over views in order; each view's room defaults to its camera's room."""
    for cam, image, depth in views:
        atlas = project_image(scene, cam, image, depth, room_id or cam.room_id, atlas)
    return atlas
