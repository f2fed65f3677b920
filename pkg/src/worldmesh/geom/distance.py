"""Point-to-triangle closest point queries."""

from __future__ import annotations

import numpy as np

from worldmesh.geom.mesh import TriMesh


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest points on triangles (a, b, c) to points p; all arrays broadcast to (..., 3).

    Region-based method from Ericson, Real-Time Collision Detection, 5.1.5.
    """
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        out = a + ab * v[..., None] + ac * w[..., None]

        # edge regions
        t_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out = np.where(m[..., None], a + ab * t_ab[..., None], out)
        t_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out = np.where(m[..., None], a + ac * t_ac[..., None], out)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        out = np.where(m[..., None], b + (c - b) * t_bc[..., None], out)

    # vertex regions take precedence
    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)
    return out


def distance_to_mesh(points, mesh: TriMesh, *, face_mask=None, chunk: int = 512):
    """Unsigned distance from each point to the nearest triangle, plus that face id."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ids = np.arange(mesh.n_faces) if face_mask is None else np.flatnonzero(face_mask)
    dist = np.full(len(pts), np.inf)
    face = np.full(len(pts), -1, dtype=np.int64)
    if len(ids) == 0:
        return dist, face
    tri = mesh.triangles[ids]
    step = max(1, chunk * 64 // max(len(ids), 1))
    for s in range(0, len(pts), step):
        p = pts[s:s + step, None, :]
        q = closest_point_on_triangles(p, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        d = np.linalg.norm(q - p, axis=-1)
        k = np.argmin(d, axis=1)
        dist[s:s + step] = d[np.arange(len(k)), k]
        face[s:s + step] = ids[k]
    return dist, face


def closest_points(points, mesh: TriMesh, *, face_mask=None) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    _, face = distance_to_mesh(pts, mesh, face_mask=face_mask)
    tri = mesh.triangles[face]
    return closest_point_on_triangles(pts, tri[:, 0], tri[:, 1], tri[:, 2])
