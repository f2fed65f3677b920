"""Software rasterizer: depth maps, condition images and color previews.

Triangles are clipped at a near plane, projected, snapped to 1/256 pixel and
filled with the top-left rule. Because snapped coordinates are small dyadic
numbers the edge functions are exact, so shared edges are watertight. Depth
is camera-space distance along the optical axis, interpolated as 1/depth.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from worldmesh.cameras import Camera
from worldmesh.errors import BadRange, MissingObjectTexture
from worldmesh.geom.mesh import TriMesh

NEAR_PLANE = 0.01
SUBPIXEL = 256.0
DEPTH_NEAR = 0.2
DEPTH_FAR = 12.0
DISCONTINUITY_JUMP = 0.1
DISCONTINUITY_BAND = 2

BACKGROUND, OBJECT_TEXTURE, WALL_TEXTURE, DEPTH_GRAY = 0, 1, 2, 3
PROVENANCE_CODES = {"background": BACKGROUND, "object_texture": OBJECT_TEXTURE,
                    "wall_texture": WALL_TEXTURE, "depth_gray": DEPTH_GRAY}
DIAGNOSTIC_COLOR = (255, 0, 255)


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel camera-space depth in meters; ``inf`` marks pixels with no hit."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        finite = np.isfinite(v)
        if np.any(v[finite] <= 0) or np.any(np.isnan(v)):
            raise ValueError("depth values must be positive or inf")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.values)


@dataclass(frozen=True, eq=False)
class Fragments:
    depth: np.ndarray  # (H, W), inf where empty
    face: np.ndarray  # (H, W) nearest face index, -1 where empty
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics on that face


@dataclass(frozen=True, eq=False)
class ConditionImage:
    rgb: np.ndarray  # (H, W, 3) uint8
    provenance: np.ndarray  # (H, W) uint8 codes

    def counts(self) -> dict[str, int]:
        return {name: int((self.provenance == code).sum()) for name, code in PROVENANCE_CODES.items()}


# -- rasterization ---------------------------------------------------------------------

def _clip_near(pts: np.ndarray, near: float):
    """Clip a camera-space triangle to depth >= near; returns (verts, bary rows)."""
    bary = np.eye(3)
    d = -pts[:, 2]
    out_p, out_b = [], []
    for i in range(3):
        j = (i + 1) % 3
        if d[i] >= near:
            out_p.append(pts[i])
            out_b.append(bary[i])
        if (d[i] >= near) != (d[j] >= near):
            t = (near - d[i]) / (d[j] - d[i])
            out_p.append(pts[i] + t * (pts[j] - pts[i]))
            out_b.append(bary[i] + t * (bary[j] - bary[i]))
    return np.array(out_p), np.array(out_b)


def _is_top_left(dx: float, dy: float) -> bool:
    return (dy == 0 and dx > 0) or dy < 0


def rasterize(scene: TriMesh, cam: Camera, near: float = NEAR_PLANE) -> Fragments:
    """Nearest-surface buffers for every pixel center (i + 0.5, j + 0.5).

    The nearest surface wins; exact depth ties go to the lowest face index,
    so the result does not depend on drawing order. Both triangle sides are
    rendered.
    """
    H, W = cam.height, cam.width
    depth = np.full((H, W), np.inf)
    face = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    if scene.n_faces == 0:
        return Fragments(depth, face, bary)
    cv = cam.world_to_camera(scene.vertices)
    dv = -cv[:, 2]
    tri_d = dv[scene.faces]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = cam.cx + cam.fx * cv[:, 0] / dv
        sy = cam.cy - cam.fy * cv[:, 1] / dv
    tx, ty = sx[scene.faces], sy[scene.faces]
    all_front = (tri_d >= near).all(axis=1)
    outside = all_front & ((tx.max(axis=1) < 0) | (tx.min(axis=1) > W) | (ty.max(axis=1) < 0) | (ty.min(axis=1) > H))
    candidates = np.flatnonzero((tri_d >= near).any(axis=1) & ~outside)

    # front to back, so the early depth reject in _fill discards most hidden faces
    candidates = candidates[np.argsort(np.maximum(tri_d[candidates].min(axis=1), near), kind="stable")]
    for fi in candidates:
        pts = cv[scene.faces[fi]]
        if all_front[fi]:
            polys = [(pts, np.eye(3))]
        else:
            p, b = _clip_near(pts, near)
            polys = [(p[[0, k, k + 1]], b[[0, k, k + 1]]) for k in range(1, len(p) - 1)]
        for p, b in polys:
            _fill(p, b, fi, cam, depth, face, bary)
    return Fragments(depth, face, bary)


def _fill(p: np.ndarray, b: np.ndarray, fi: int, cam: Camera, depth, face, bary) -> None:
    H, W = depth.shape
    d = -p[:, 2]
    s = np.empty((3, 2))
    s[:, 0] = np.round((cam.cx + cam.fx * p[:, 0] / d) * SUBPIXEL) / SUBPIXEL
    s[:, 1] = np.round((cam.cy - cam.fy * p[:, 1] / d) * SUBPIXEL) / SUBPIXEL
    area = (s[1, 0] - s[0, 0]) * (s[2, 1] - s[0, 1]) - (s[1, 1] - s[0, 1]) * (s[2, 0] - s[0, 0])
    if area == 0:
        return
    if area < 0:
        s, d, b = s[[0, 2, 1]], d[[0, 2, 1]], b[[0, 2, 1]]
        area = -area
    x0 = max(int(np.floor(s[:, 0].min() - 0.5)), 0)
    x1 = min(int(np.ceil(s[:, 0].max() - 0.5)), W - 1)
    y0 = max(int(np.floor(s[:, 1].min() - 0.5)), 0)
    y1 = min(int(np.ceil(s[:, 1].max() - 0.5)), H - 1)
    if x0 > x1 or y0 > y1:
        return
    sub = depth[y0:y1 + 1, x0:x1 + 1]
    if d.min() > sub.max():
        return  # every covered pixel already holds something nearer
    px = (np.arange(x0, x1 + 1) + 0.5)[None, :]
    py = (np.arange(y0, y1 + 1) + 0.5)[:, None]
    inside = None
    edge = []
    for i in range(3):
        a, c = s[(i + 1) % 3], s[(i + 2) % 3]
        dx, dy = c[0] - a[0], c[1] - a[1]
        e = dx * (py - a[1]) - dy * (px - a[0])
        ok = e >= 0 if _is_top_left(dx, dy) else e > 0
        inside = ok if inside is None else inside & ok
        edge.append(e)
    rows = np.flatnonzero(inside.any(axis=1))
    if len(rows) == 0:
        return
    cols = np.flatnonzero(inside.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    inside = inside[r0:r1, c0:c1]
    y0, x0 = y0 + r0, x0 + c0
    sub = depth[y0:y0 + (r1 - r0), x0:x0 + (c1 - c0)]
    fsub = face[y0:y0 + (r1 - r0), x0:x0 + (c1 - c0)]
    # perspective-correct weights lam_i / d_i, evaluated over the tight box
    w = [e[r0:r1, c0:c1] * (1.0 / (area * d[i])) for i, e in enumerate(edge)]
    inv = w[0] + w[1]
    inv += w[2]
    with np.errstate(divide="ignore"):
        z = 1.0 / inv
    closer = inside & ((z < sub) | ((z == sub) & (fi < fsub)))
    if not closer.any():
        return
    np.copyto(sub, z, where=closer)
    fsub[closer] = fi
    lam = np.stack([wi[closer] for wi in w], axis=1) * z[closer][:, None]
    bary[y0:y0 + (r1 - r0), x0:x0 + (c1 - c0)][closer] = lam @ b


def render_depth(scene: TriMesh, cam: Camera) -> DepthMap:
    return DepthMap(rasterize(scene, cam).depth)


# -- depth encodings --------------------------------------------------------------------

def encode_depth_gray(depth: DepthMap | np.ndarray, near: float = DEPTH_NEAR, far: float = DEPTH_FAR) -> np.ndarray:
    """8-bit gray: ``near`` and closer map to 255, ``far`` and beyond to 0, no hit to 0."""
    if not near < far:
        raise BadRange(f"near ({near}) must be below far ({far})")
    d = depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    out = np.zeros(d.shape, dtype=np.uint8)
    hit = np.isfinite(d)
    g = np.clip((far - d[hit]) / (far - near), 0.0, 1.0) * 255.0
    out[hit] = np.round(g).astype(np.uint8)
    return out


def discontinuity_mask(depth: DepthMap | np.ndarray, jump: float = DISCONTINUITY_JUMP,
                       band: int = DISCONTINUITY_BAND) -> np.ndarray:
    """Pixels within ``band`` px of a 4-neighbour depth jump above ``jump`` m (or a hit/miss border)."""
    d = depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    hit = np.isfinite(d)
    edge = np.zeros(d.shape, dtype=bool)
    for axis in (0, 1):
        a = np.take(d, range(d.shape[axis] - 1), axis=axis)
        b = np.take(d, range(1, d.shape[axis]), axis=axis)
        ha = np.take(hit, range(d.shape[axis] - 1), axis=axis)
        hb = np.take(hit, range(1, d.shape[axis]), axis=axis)
        with np.errstate(invalid="ignore"):
            jumpy = (ha != hb) | (ha & hb & (np.abs(a - b) > jump))
        sl_a = [slice(None)] * 2
        sl_b = [slice(None)] * 2
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        edge[tuple(sl_a)] |= jumpy
        edge[tuple(sl_b)] |= jumpy
    if band > 0:
        edge = ndimage.binary_dilation(edge, structure=np.ones((2 * band + 1, 2 * band + 1), bool))
    return edge


# -- shading ------------------------------------------------------------------------------

def _sample_nearest(img: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Nearest texel lookup with uv in [0,1]^2, v pointing up the image."""
    h, w = img.shape[:2]
    x = np.clip(np.floor(uv[:, 0] * w).astype(np.int64), 0, w - 1)
    y = np.clip(np.floor((1.0 - uv[:, 1]) * h).astype(np.int64), 0, h - 1)
    return img[y, x]


def _shade(scene: TriMesh, cam: Camera, atlas, near: float, far: float, flat_gray: bool, frags=None):
    frags = rasterize(scene, cam) if frags is None else frags
    H, W = frags.depth.shape
    rgb = np.zeros((H, W, 3), dtype=np.uint8)
    prov = np.full((H, W), BACKGROUND, dtype=np.uint8)
    hit = frags.face >= 0
    if not hit.any():
        return rgb, prov, frags
    gray = encode_depth_gray(frags.depth, near, far)
    if flat_gray:
        rgb[hit] = DIAGNOSTIC_COLOR
    else:
        rgb[hit] = gray[hit, None]
    prov[hit] = DEPTH_GRAY

    yy, xx = np.nonzero(hit)
    fids = frags.face[yy, xx]
    bc = frags.bary[yy, xx]
    is_obj = (scene.category == "object")[fids]

    if is_obj.any():
        oy, ox, of, ob = yy[is_obj], xx[is_obj], fids[is_obj], bc[is_obj]
        colors = np.zeros((len(of), 3), dtype=np.uint8)
        oid_names, oid_code = np.unique(scene.object_id, return_inverse=True)
        pix_oid = oid_code.reshape(-1)[of]
        for code in np.unique(pix_oid):
            oid = oid_names[code]
            sel = pix_oid == code
            tex = scene.textures.get(oid)
            corners = scene.faces[of[sel]]
            if tex is None or scene.uv is None or not np.isfinite(scene.uv[corners]).all():
                raise MissingObjectTexture(f"object {oid!r} has faces without texture coordinates")
            uv = np.einsum("nk,nkj->nj", ob[sel], scene.uv[corners])
            colors[sel] = _sample_nearest(np.asarray(tex), uv)[:, :3]
        rgb[oy, ox] = colors
        prov[oy, ox] = OBJECT_TEXTURE

    struct = ~is_obj
    if atlas is not None and struct.any():
        sy, sx, sf, sb = yy[struct], xx[struct], fids[struct], bc[struct]
        pts = np.einsum("nk,nkj->nj", sb, scene.triangles[sf])
        normals = scene.face_normals()[sf]
        if hasattr(atlas, "lookup_groups"):
            # group pixels by surface through per-face integer codes (cheaper than comparing strings per pixel)
            names, code = np.unique(scene.surface, return_inverse=True)
            pix = code.reshape(-1)[sf]
            groups = ((str(names[k]), np.flatnonzero(pix == k)) for k in np.unique(pix))
            color, conf = atlas.lookup_groups(groups, pts, normals)
        else:
            color, conf = atlas.lookup(scene.surface[sf], pts, normals)
        ok = conf > 0
        if ok.any():
            base = gray[sy[ok], sx[ok]].astype(np.float64)[:, None]
            a = conf[ok, None]
            blended = a * color[ok] * 255.0 + (1.0 - a) * base
            rgb[sy[ok], sx[ok]] = np.clip(np.round(blended), 0, 255).astype(np.uint8)
            prov[sy[ok], sx[ok]] = WALL_TEXTURE
    return rgb, prov, frags


def render_condition(scene: TriMesh, cam: Camera, atlas=None, near: float = DEPTH_NEAR,
                     far: float = DEPTH_FAR) -> ConditionImage:
    """Composite: textured objects, confidence-blended wall texture, gray depth elsewhere.

    The atlas confidence of a texel is its blend alpha over the gray depth.
    """
    rgb, prov, _ = _shade(scene, cam, atlas, near, far, flat_gray=False)
    return ConditionImage(rgb, prov)


def render_view(scene: TriMesh, cam: Camera, atlas=None, near: float = DEPTH_NEAR,
                far: float = DEPTH_FAR) -> tuple[DepthMap, ConditionImage]:
    """Depth map and condition image from a single rasterization."""
    frags = rasterize(scene, cam)
    rgb, prov, _ = _shade(scene, cam, atlas, near, far, flat_gray=False, frags=frags)
    return DepthMap(frags.depth), ConditionImage(rgb, prov)


def render_color(scene: TriMesh, cam: Camera, atlas=None, near: float = DEPTH_NEAR,
                 far: float = DEPTH_FAR) -> np.ndarray:
    """Preview render: like the condition image with untextured surfaces in a flat color."""
    rgb, _, _ = _shade(scene, cam, atlas, near, far, flat_gray=True)
    return rgb


# -- files --------------------------------------------------------------------------------

def save_depth(depth: DepthMap, path_tiff, path_png=None) -> None:
    """Float32 TIFF (inf kept) plus an optional 16-bit millimeter PNG preview (0 = no hit)."""
    Image.fromarray(depth.values.astype(np.float32), mode="F").save(path_tiff, format="TIFF")
    if path_png is not None:
        mm = np.where(depth.hit, np.clip(np.round(depth.values * 1000.0), 1, 65535), 0).astype(np.uint16)
        Image.fromarray(mm).save(path_png, format="PNG")


def load_depth(path) -> DepthMap:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    arr = np.where(np.isfinite(arr) & (arr > 0), arr, np.inf)
    return DepthMap(arr)


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(np.ascontiguousarray(img)).save(Path(path), format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))
