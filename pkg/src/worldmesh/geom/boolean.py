"""Boolean subtraction of a convex cutter from a closed triangle mesh."""

from __future__ import annotations

from collections import Counter

import numpy as np

from worldmesh.errors import NonManifoldInput
from worldmesh.geom.distance import distance_to_mesh
from worldmesh.geom.mesh import DEGENERATE_AREA, TriMesh
from worldmesh.geom.raycast import point_in_solid

PLANE_EPS = 1e-9


def _planes(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unique supporting planes (unit normal, offset) of the mesh faces."""
    n = mesh.face_normals()
    d = np.einsum("ij,ij->i", n, mesh.triangles[:, 0])
    normals: list[np.ndarray] = []
    offsets: list[float] = []
    for ni, di in zip(n, d):
        if any(np.abs(ni - nj).max() < 1e-9 and abs(di - dj) < PLANE_EPS for nj, dj in zip(normals, offsets)):
            continue
        normals.append(ni)
        offsets.append(float(di))
    return np.array(normals).reshape(-1, 3), np.array(offsets)


def _split(poly: np.ndarray, n: np.ndarray, d: float):
    """Split a convex polygon by a plane into (outside, inside) parts.

    Either part is None when empty; points on the plane go to both sides.
    Returns the string "coplanar" when the whole polygon lies on the plane.
    """
    s = poly @ n - d
    sg = np.where(s > PLANE_EPS, 1, np.where(s < -PLANE_EPS, -1, 0))
    if not sg.any():
        return "coplanar"
    if (sg >= 0).all():
        return poly, None
    if (sg <= 0).all():
        return None, poly
    out, inn = [], []
    k = len(poly)
    for i in range(k):
        j = (i + 1) % k
        if sg[i] >= 0:
            out.append(poly[i])
        if sg[i] <= 0:
            inn.append(poly[i])
        if sg[i] * sg[j] < 0:
            x = poly[i] + (poly[j] - poly[i]) * (s[i] / (s[i] - s[j]))
            out.append(x)
            inn.append(x)
    return np.array(out), np.array(inn)


def _poly_area(poly: np.ndarray) -> float:
    if poly is None or len(poly) < 3:
        return 0.0
    c = np.cross(poly[1:-1] - poly[0], poly[2:] - poly[0])
    return 0.5 * float(np.linalg.norm(c.sum(axis=0)))


def _fan(poly: np.ndarray) -> list[np.ndarray]:
    tris = [np.array([poly[0], poly[i], poly[i + 1]]) for i in range(1, len(poly) - 1)]
    return [t for t in tris if _poly_area(t) > DEGENERATE_AREA]


def _check_manifold(base: TriMesh, region: np.ndarray) -> None:
    edges = Counter()
    for f in base.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edges[(min(a, b), max(a, b))] += 1
    for f in base.faces[region]:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            if edges[(min(a, b), max(a, b))] > 2:
                raise NonManifoldInput(f"edge ({a}, {b}) is shared by more than two triangles")


def _outside_pieces(tri: np.ndarray, tri_normal: np.ndarray, normals, offsets):
    """Parts of a triangle outside the convex cutter; None means 'keep as is'."""
    pieces: list[np.ndarray] = []
    remaining = tri
    split = False
    for n, d in zip(normals, offsets):
        res = _split(remaining, n, d)
        if isinstance(res, str):
            if float(n @ tri_normal) > 0:
                continue  # same-facing coplanar: lies on the removed region's boundary
            out, inn = remaining, None
        else:
            out, inn = res
        if inn is None:
            if not split:
                return None
            pieces.append(out)
            return pieces
        if out is not None:
            split = True
            pieces.append(out)
        remaining = inn
    return pieces


def mesh_subtract(base: TriMesh, cutter: TriMesh) -> TriMesh:
    """Return ``base`` minus the volume of a closed convex ``cutter``.

    Base faces outside the cutter survive with their tags; the cutter's faces
    that fall inside the base become cut faces (reversed) inheriting every tag
    from the nearest base face.
    """
    normals, offsets = _planes(cutter)
    if cutter.n_faces == 0 or base.n_faces == 0:
        return base
    if np.any(cutter.vertices @ normals.T - offsets > 1e-7):
        raise ValueError("cutter must be a closed convex solid")
    lo, hi = cutter.bounds()
    tri = base.triangles
    tlo, thi = tri.min(axis=1), tri.max(axis=1)
    region = np.all(thi >= lo - PLANE_EPS, axis=1) & np.all(tlo <= hi + PLANE_EPS, axis=1)
    _check_manifold(base, region)

    keep = np.ones(base.n_faces, dtype=bool)
    new_tris: list[np.ndarray] = []
    new_src: list[int] = []
    base_normals = base.face_normals()
    changed = False
    for i in np.flatnonzero(region):
        pieces = _outside_pieces(tri[i], base_normals[i], normals, offsets)
        if pieces is None:
            continue
        changed = True
        keep[i] = False
        for poly in pieces:
            for t in _fan(poly):
                new_tris.append(t)
                new_src.append(i)

    # cutter faces that lie inside the base solid
    region_ids = np.flatnonzero(region)
    sub = base.select(region)
    bn, bd = _planes(sub)
    cut_tris: list[np.ndarray] = []
    for ct in cutter.triangles:
        polys = [ct]
        for n, d in zip(bn, bd):
            nxt = []
            for p in polys:
                res = _split(p, n, d)
                if isinstance(res, str):
                    nxt.append(p)
                    continue
                nxt.extend(x for x in res if x is not None and _poly_area(x) > DEGENERATE_AREA)
            polys = nxt
        if not polys:
            continue
        centers = np.array([p.mean(axis=0) for p in polys])
        on_surface, _ = distance_to_mesh(centers, sub)
        candidates = [p for p, dist in zip(polys, on_surface) if dist > 1e-7]
        if not candidates:
            continue
        inside = point_in_solid(base, np.array([p.mean(axis=0) for p in candidates]))
        for p, ins in zip(candidates, inside):
            if ins:
                cut_tris.extend(t[::-1] for t in _fan(p))
    if cut_tris:
        changed = True
    if not changed:
        return base

    parts = [base.select(keep)]
    if new_tris:
        src = np.array(new_src)
        v = np.concatenate(new_tris)
        parts.append(TriMesh.from_arrays(
            v, np.arange(len(v)).reshape(-1, 3),
            room=base.room[src], category=base.category[src],
            object_id=base.object_id[src], surface=base.surface[src],
        ))
    if cut_tris:
        v = np.concatenate(cut_tris)
        centers = v.reshape(-1, 3, 3).mean(axis=1)
        if len(region_ids):
            _, nearest = distance_to_mesh(centers, sub)
            src = region_ids[nearest]
        else:
            _, src = distance_to_mesh(centers, base)
        parts.append(TriMesh.from_arrays(
            v, np.arange(len(v)).reshape(-1, 3),
            room=base.room[src], category=base.category[src],
            object_id=base.object_id[src], surface=base.surface[src],
        ))
    merged = TriMesh.merge(parts)
    if base.textures:
        merged = merged.with_textures(base.textures)
    return merged
