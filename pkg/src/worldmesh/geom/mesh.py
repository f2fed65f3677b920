"""Tagged triangle meshes."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

CATEGORIES = ("wall", "floor", "ceiling", "object")
STRUCTURAL = ("wall", "floor", "ceiling")
DEGENERATE_AREA = 1e-12

_TAG_FIELDS = ("room", "category", "object_id", "surface")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def triangle_areas(tris: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle soup with per-face tags.

    Tags are parallel string arrays: ``room``, ``category`` (one of
    CATEGORIES), ``object_id`` ('' when not an object) and ``surface``
    (texture chart id, '' when the face has no chart). ``uv`` holds optional
    per-vertex texture coordinates (NaN where absent) and ``textures`` maps
    object ids to RGB uint8 images.
    """

    vertices: np.ndarray
    faces: np.ndarray
    room: np.ndarray
    category: np.ndarray
    object_id: np.ndarray
    surface: np.ndarray
    uv: np.ndarray | None = None
    textures: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        v = _frozen(np.array(self.vertices, dtype=np.float64).reshape(-1, 3))
        f = _frozen(np.array(self.faces, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        m = len(f)
        for name in _TAG_FIELDS:
            tag = np.array(getattr(self, name), dtype=str).reshape(-1)
            if tag.shape != (m,):
                raise ValueError(f"tag {name!r} has {tag.shape[0]} entries for {m} faces")
            object.__setattr__(self, name, _frozen(tag))
        if m and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        bad = set(np.unique(self.category)) - set(CATEGORIES)
        if bad:
            raise ValueError(f"unknown categories {sorted(bad)}")
        if self.uv is not None:
            uv = _frozen(np.array(self.uv, dtype=np.float64).reshape(-1, 2))
            if len(uv) != len(v):
                raise ValueError("uv must have one entry per vertex")
            object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "textures", dict(self.textures))

    # construction -----------------------------------------------------
    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), int), [], [], [], [])

    @classmethod
    def from_arrays(
        cls,
        vertices,
        faces,
        *,
        room="",
        category="wall",
        object_id="",
        surface="",
        uv=None,
        textures=None,
        drop_degenerate: bool = True,
    ) -> "TriMesh":
        """Build a mesh, broadcasting scalar tags and dropping sliver faces."""
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        m = len(f)
        tags = {}
        for name, val in zip(_TAG_FIELDS, (room, category, object_id, surface)):
            arr = np.array(val, dtype=str)
            tags[name] = np.broadcast_to(arr, (m,)).copy() if arr.ndim == 0 else arr.reshape(-1)
        if drop_degenerate and m:
            keep = triangle_areas(v[f]) > DEGENERATE_AREA
            f = f[keep]
            tags = {k: t[keep] for k, t in tags.items()}
        return cls(v, f, uv=uv, textures=textures or {}, **tags)

    @staticmethod
    def merge(meshes: Sequence["TriMesh"]) -> "TriMesh":
        meshes = [m for m in meshes if m.n_faces or len(m.vertices)]
        if not meshes:
            return TriMesh.empty()
        offsets = np.cumsum([0] + [len(m.vertices) for m in meshes[:-1]])
        uv = None
        if any(m.uv is not None for m in meshes):
            uv = np.concatenate(
                [m.uv if m.uv is not None else np.full((len(m.vertices), 2), np.nan) for m in meshes]
            )
        textures: dict[str, np.ndarray] = {}
        for m in meshes:
            textures.update(m.textures)
        return TriMesh(
            np.concatenate([m.vertices for m in meshes]),
            np.concatenate([m.faces + o for m, o in zip(meshes, offsets)]),
            *(np.concatenate([getattr(m, k) for m in meshes]) for k in _TAG_FIELDS),
            uv=uv,
            textures=textures,
        )

    # derived quantities ----------------------------------------------
    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def face_areas(self) -> np.ndarray:
        return triangle_areas(self.triangles)

    def volume(self) -> float:
        """Signed volume enclosed by the (outward oriented) surface."""
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def bounds(self) -> np.ndarray:
        used = self.vertices[np.unique(self.faces)] if self.n_faces else self.vertices
        return np.array([used.min(axis=0), used.max(axis=0)])

    def tag_groups(self) -> list[tuple[str, str, str]]:
        keys = zip(self.room, self.category, self.object_id)
        return sorted(set(keys))

    # transformations ------------------------------------------------------
    def select(self, mask) -> "TriMesh":
        """Faces where ``mask`` holds, with unused vertices removed."""
        mask = np.asarray(mask)
        faces = self.faces[mask]
        used, inverse = np.unique(faces, return_inverse=True)
        return TriMesh(
            self.vertices[used],
            inverse.reshape(-1, 3),
            *(getattr(self, k)[mask] for k in _TAG_FIELDS),
            uv=None if self.uv is None else self.uv[used],
            textures={k: t for k, t in self.textures.items() if k in set(self.object_id[mask])},
        )

    def with_tags(self, **tags) -> "TriMesh":
        vals = {k: getattr(self, k) for k in _TAG_FIELDS}
        for k, v in tags.items():
            if k not in vals:
                raise KeyError(k)
            arr = np.array(v, dtype=str)
            vals[k] = np.broadcast_to(arr, (self.n_faces,)).copy() if arr.ndim == 0 else arr
        return TriMesh(self.vertices, self.faces, uv=self.uv, textures=self.textures, **vals)

    def with_textures(self, textures: Mapping[str, np.ndarray]) -> "TriMesh":
        return TriMesh(self.vertices, self.faces, *(getattr(self, k) for k in _TAG_FIELDS),
                       uv=self.uv, textures=textures)

    def transformed(self, rotation=None, translation=None) -> "TriMesh":
        """Apply x -> R x + t to every vertex."""
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriMesh(v, self.faces, *(getattr(self, k) for k in _TAG_FIELDS),
                       uv=self.uv, textures=self.textures)

    def flipped(self) -> "TriMesh":
        return TriMesh(self.vertices, self.faces[:, ::-1], *(getattr(self, k) for k in _TAG_FIELDS),
                       uv=self.uv, textures=self.textures)

    def deduplicated(self, tol: float = 1e-9) -> "TriMesh":
        """Merge vertices closer than ``tol`` (grid snapped) and drop unused ones."""
        key = np.round(self.vertices / tol).astype(np.int64)
        _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
        return TriMesh(
            self.vertices[first],
            inverse[self.faces],
            *(getattr(self, k) for k in _TAG_FIELDS),
            uv=None if self.uv is None else self.uv[first],
            textures=self.textures,
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.vertices, self.faces, *(getattr(self, k) for k in _TAG_FIELDS)):
            h.update(np.ascontiguousarray(a).tobytes())
        if self.uv is not None:
            h.update(self.uv.tobytes())
        for k in sorted(self.textures):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.textures[k]).tobytes())
        return h.hexdigest()

    # persistence ----------------------------------------------------------
    def save_npz(self, path) -> None:
        arrays = {k: getattr(self, k) for k in ("vertices", "faces", *_TAG_FIELDS)}
        if self.uv is not None:
            arrays["uv"] = self.uv
        for k, img in self.textures.items():
            arrays[f"texture::{k}"] = img
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load_npz(cls, path) -> "TriMesh":
        with np.load(path) as data:
            textures = {k.split("::", 1)[1]: data[k] for k in data.files if k.startswith("texture::")}
            return cls(
                data["vertices"], data["faces"], *(data[k] for k in _TAG_FIELDS),
                uv=data["uv"] if "uv" in data.files else None, textures=textures,
            )


def box_mesh(lo, hi, **tags) -> TriMesh:
    """Axis-aligned closed box with outward-facing triangles."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    c = np.array([[lo[0] if i & 1 == 0 else hi[0], lo[1] if i & 2 == 0 else hi[1],
                   lo[2] if i & 4 == 0 else hi[2]] for i in range(8)])
    faces = [
        (0, 2, 1), (1, 2, 3),  # -z
        (4, 5, 6), (5, 7, 6),  # +z
        (0, 1, 4), (1, 5, 4),  # -y
        (2, 6, 3), (3, 6, 7),  # +y
        (0, 4, 2), (2, 4, 6),  # -x
        (1, 3, 5), (3, 7, 5),  # +x
    ]
    return TriMesh.from_arrays(c, faces, **tags)


def prism_mesh(footprint: np.ndarray, z0: float, z1: float, **tags) -> TriMesh:
    """Closed vertical prism over a CCW convex-or-simple footprint.

    Caps are fan/ear triangulated; side quads are split into two triangles.
    """
    fp = np.asarray(footprint, dtype=np.float64)
    n = len(fp)
    bottom = np.column_stack([fp, np.full(n, z0)])
    top = np.column_stack([fp, np.full(n, z1)])
    verts = np.vstack([bottom, top])
    cap = triangulate_polygon(fp)
    faces = [(c, b, a) for a, b, c in cap]
    faces += [(a + n, b + n, c + n) for a, b, c in cap]
    for i in range(n):
        j = (i + 1) % n
        faces += [(i, j, j + n), (i, j + n, i + n)]
    return TriMesh.from_arrays(verts, faces, **tags)


def triangulate_polygon(pts: np.ndarray) -> list[tuple[int, int, int]]:
    """Ear-clipping triangulation of a simple CCW polygon (CCW triangles)."""
    idx = list(range(len(pts)))
    out = []

    def cross(o, a, b):
        return (pts[a][0] - pts[o][0]) * (pts[b][1] - pts[o][1]) - (pts[a][1] - pts[o][1]) * (pts[b][0] - pts[o][0])

    def inside(p, a, b, c):
        return cross(a, b, p) >= -1e-15 and cross(b, c, p) >= -1e-15 and cross(c, a, p) >= -1e-15

    guard = 0
    while len(idx) > 3 and guard < 10000:
        guard += 1
        m = len(idx)
        for k in range(m):
            a, b, c = idx[(k - 1) % m], idx[k], idx[(k + 1) % m]
            if cross(a, b, c) <= 1e-15:
                continue
            if any(inside(p, a, b, c) for p in idx if p not in (a, b, c)
                   and not np.allclose(pts[p], pts[a]) and not np.allclose(pts[p], pts[b])
                   and not np.allclose(pts[p], pts[c])):
                continue
            out.append((a, b, c))
            idx.pop(k)
            break
        else:
            # only collinear remnants left
            break
    if len(idx) == 3:
        out.append(tuple(idx))
    return out
