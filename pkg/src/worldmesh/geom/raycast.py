"""Ray/triangle intersection (Moller-Trumbore).

The batched path evaluates exactly the same floating-point expressions, in
the same order, as the scalar per-triangle routine, so both agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from worldmesh.geom.mesh import TriMesh

T_MIN = 1e-6
PARALLEL_EPS = 1e-12


@dataclass(frozen=True)
class RayHit:
    t: float
    face_index: int
    barycentric: tuple[float, float, float]


def intersect_triangle(origin, direction, v0, v1, v2):
    """Scalar Moller-Trumbore. Returns (t, u, v) or None; plain Python floats."""
    e1 = (v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2])
    e2 = (v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2])
    p = (direction[1] * e2[2] - direction[2] * e2[1],
         direction[2] * e2[0] - direction[0] * e2[2],
         direction[0] * e2[1] - direction[1] * e2[0])
    det = e1[0] * p[0] + e1[1] * p[1] + e1[2] * p[2]
    if abs(det) < PARALLEL_EPS:
        return None
    inv = 1.0 / det
    s = (origin[0] - v0[0], origin[1] - v0[1], origin[2] - v0[2])
    u = (s[0] * p[0] + s[1] * p[1] + s[2] * p[2]) * inv
    if u < 0.0 or u > 1.0:
        return None
    q = (s[1] * e1[2] - s[2] * e1[1],
         s[2] * e1[0] - s[0] * e1[2],
         s[0] * e1[1] - s[1] * e1[0])
    v = (direction[0] * q[0] + direction[1] * q[1] + direction[2] * q[2]) * inv
    if v < 0.0 or u + v > 1.0:
        return None
    t = (e2[0] * q[0] + e2[1] * q[1] + e2[2] * q[2]) * inv
    if t <= T_MIN:
        return None
    return t, u, v


def _intersect_all(tri: np.ndarray, origin: np.ndarray, direction: np.ndarray):
    """Vectorized intersection of one ray with all triangles (M,3,3)."""
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    d = direction
    p = np.stack([d[1] * e2[:, 2] - d[2] * e2[:, 1],
                  d[2] * e2[:, 0] - d[0] * e2[:, 2],
                  d[0] * e2[:, 1] - d[1] * e2[:, 0]], axis=1)
    det = e1[:, 0] * p[:, 0] + e1[:, 1] * p[:, 1] + e1[:, 2] * p[:, 2]
    ok = np.abs(det) >= PARALLEL_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = origin - v0
        u = (s[:, 0] * p[:, 0] + s[:, 1] * p[:, 1] + s[:, 2] * p[:, 2]) * inv
        q = np.stack([s[:, 1] * e1[:, 2] - s[:, 2] * e1[:, 1],
                      s[:, 2] * e1[:, 0] - s[:, 0] * e1[:, 2],
                      s[:, 0] * e1[:, 1] - s[:, 1] * e1[:, 0]], axis=1)
        v = (d[0] * q[:, 0] + d[1] * q[:, 1] + d[2] * q[:, 2]) * inv
        t = (e2[:, 0] * q[:, 0] + e2[:, 1] * q[:, 1] + e2[:, 2] * q[:, 2]) * inv
        ok &= (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > T_MIN)
    return np.where(ok, t, np.inf), u, v


def raycast(mesh: TriMesh, origin, direction) -> RayHit | None:
    """Nearest hit with t > 1e-6 along a unit direction, or None.

    Ties in t resolve to the lowest face index.
    """
    d = np.asarray(direction, dtype=np.float64)
    if abs(float(np.linalg.norm(d)) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    if mesh.n_faces == 0:
        return None
    o = np.asarray(origin, dtype=np.float64)
    t, u, v = _intersect_all(mesh.triangles, o, d)
    i = int(np.argmin(t))
    if not np.isfinite(t[i]):
        return None
    return RayHit(float(t[i]), i, (float(1.0 - u[i] - v[i]), float(u[i]), float(v[i])))


def raycast_batch(mesh: TriMesh, origins, directions, *, face_mask=None, chunk: int = 256):
    """Nearest-hit distances and face ids for many rays.

    Returns (t, face) with t = inf and face = -1 on a miss. ``face_mask``
    restricts the candidate triangles.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    o, d = np.broadcast_arrays(o, d)
    n = len(o)
    t_out = np.full(n, np.inf)
    f_out = np.full(n, -1, dtype=np.int64)
    ids = np.arange(mesh.n_faces) if face_mask is None else np.flatnonzero(face_mask)
    if len(ids) == 0 or n == 0:
        return t_out, f_out
    tri = mesh.triangles[ids]
    v0 = tri[:, 0][None]
    e1 = (tri[:, 1] - tri[:, 0])[None]
    e2 = (tri[:, 2] - tri[:, 0])[None]
    for a in range(0, n, chunk):
        oo = o[a:a + chunk, None, :]
        dd = d[a:a + chunk, None, :]
        p = np.stack([dd[..., 1] * e2[..., 2] - dd[..., 2] * e2[..., 1],
                      dd[..., 2] * e2[..., 0] - dd[..., 0] * e2[..., 2],
                      dd[..., 0] * e2[..., 1] - dd[..., 1] * e2[..., 0]], axis=-1)
        det = e1[..., 0] * p[..., 0] + e1[..., 1] * p[..., 1] + e1[..., 2] * p[..., 2]
        ok = np.abs(det) >= PARALLEL_EPS
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s = oo - v0
            u = (s[..., 0] * p[..., 0] + s[..., 1] * p[..., 1] + s[..., 2] * p[..., 2]) * inv
            q = np.stack([s[..., 1] * e1[..., 2] - s[..., 2] * e1[..., 1],
                          s[..., 2] * e1[..., 0] - s[..., 0] * e1[..., 2],
                          s[..., 0] * e1[..., 1] - s[..., 1] * e1[..., 0]], axis=-1)
            v = (dd[..., 0] * q[..., 0] + dd[..., 1] * q[..., 1] + dd[..., 2] * q[..., 2]) * inv
            t = (e2[..., 0] * q[..., 0] + e2[..., 1] * q[..., 1] + e2[..., 2] * q[..., 2]) * inv
            ok &= (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > T_MIN)
        t = np.where(ok, t, np.inf)
        k = np.argmin(t, axis=1)
        best = t[np.arange(len(k)), k]
        t_out[a:a + chunk] = best
        f_out[a:a + chunk] = np.where(np.isfinite(best), ids[k], -1)
    return t_out, f_out


_PROBE_DIRS = np.array([
    [0.5773502691896258, 0.5773502691896257, 0.5773502691896259],
    [-0.2672612419124244, 0.5345224838248488, 0.8017837257372732],
    [0.6246950475544243, -0.7808688094430304, 0.0123],
    [-0.7071, -0.1234, 0.6963],
    [0.1111, 0.9333, -0.3416],
    [-0.4472, -0.3301, -0.8316],
    [0.8944, 0.0917, -0.4378],
])
_PROBE_DIRS /= np.linalg.norm(_PROBE_DIRS, axis=1, keepdims=True)


def point_in_solid(mesh: TriMesh, points) -> np.ndarray:
    """Inside test for a closed surface by ray parity.

    Rays grazing a triangle edge or vertex are discarded; the verdict is the
    majority over the first three clean rays.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri = mesh.triangles
    out = np.zeros(len(pts), dtype=bool)
    for i, p in enumerate(pts):
        votes = []
        for d in _PROBE_DIRS:
            t, u, v = _intersect_all(tri, p, d)
            hit = np.isfinite(t)
            w = 1.0 - u[hit] - v[hit]
            if np.any(np.minimum(np.minimum(u[hit], v[hit]), w) < 1e-9):
                continue
            votes.append(int(hit.sum()) % 2)
            if len(votes) == 3:
                break
        out[i] = sum(votes) * 2 > len(votes)
    return out
