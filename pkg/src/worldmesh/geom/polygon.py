"""Simple 2D polygons and per-edge inward offsetting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from worldmesh.errors import InsetCollapse, InvalidPolygon

COINCIDENT_TOL = 1e-9


def signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, p, eps) -> bool:
    return (
        min(a[0], b[0]) - eps <= p[0] <= max(a[0], b[0]) + eps
        and min(a[1], b[1]) - eps <= p[1] <= max(a[1], b[1]) + eps
    )


def segments_intersect(a, b, c, d, eps: float = 1e-12) -> bool:
    """Closed-segment intersection test (touching counts)."""
    o1, o2 = _orient(a, b, c), _orient(a, b, d)
    o3, o4 = _orient(c, d, a), _orient(c, d, b)
    if ((o1 > eps and o2 < -eps) or (o1 < -eps and o2 > eps)) and (
        (o3 > eps and o4 < -eps) or (o3 < -eps and o4 > eps)
    ):
        return True
    if abs(o1) <= eps and _on_segment(a, b, c, eps):
        return True
    if abs(o2) <= eps and _on_segment(a, b, d, eps):
        return True
    if abs(o3) <= eps and _on_segment(c, d, a, eps):
        return True
    if abs(o4) <= eps and _on_segment(c, d, b, eps):
        return True
    return False


def is_simple(pts: np.ndarray) -> bool:
    n = len(pts)
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue
            if segments_intersect(a, b, pts[j], pts[(j + 1) % n]):
                return False
    return True


@dataclass(frozen=True, eq=False)
class Polygon2D:
    """Counter-clockwise simple polygon in the XY plane (meters)."""

    vertices: np.ndarray

    def __post_init__(self):
        pts = np.array(self.vertices, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            raise InvalidPolygon("polygon needs at least 3 vertices")
        step = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
        if np.any(step <= COINCIDENT_TOL):
            raise InvalidPolygon("consecutive vertices coincide")
        if not is_simple(pts):
            raise InvalidPolygon("polygon is self-intersecting")
        if signed_area(pts) <= 0:
            raise InvalidPolygon("polygon must be counter-clockwise with positive area")
        pts.setflags(write=False)
        object.__setattr__(self, "vertices", pts)

    def __len__(self) -> int:
        return len(self.vertices)

    def __eq__(self, other) -> bool:
        return isinstance(other, Polygon2D) and np.array_equal(self.vertices, other.vertices)

    @property
    def area(self) -> float:
        return signed_area(self.vertices)

    @property
    def perimeter(self) -> float:
        return float(self.edge_lengths().sum())

    def edge(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.vertices)
        return self.vertices[i % n], self.vertices[(i + 1) % n]

    def edge_vectors(self) -> np.ndarray:
        return np.roll(self.vertices, -1, axis=0) - self.vertices

    def edge_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.edge_vectors(), axis=1)

    def inward_normals(self) -> np.ndarray:
        e = self.edge_vectors() / self.edge_lengths()[:, None]
        return np.stack([-e[:, 1], e[:, 0]], axis=1)

    def centroid(self) -> np.ndarray:
        p = self.vertices
        q = np.roll(p, -1, axis=0)
        cross = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
        a = cross.sum() / 2.0
        cx = ((p[:, 0] + q[:, 0]) * cross).sum() / (6.0 * a)
        cy = ((p[:, 1] + q[:, 1]) * cross).sum() / (6.0 * a)
        return np.array([cx, cy])

    def contains(self, points) -> np.ndarray:
        """Crossing-number point-in-polygon test, vectorized over points."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        x, y = pts[:, 0:1], pts[:, 1:2]
        a = self.vertices[None, :, :]
        b = np.roll(self.vertices, -1, axis=0)[None, :, :]
        ay, by = a[..., 1], b[..., 1]
        straddle = (ay > y) != (by > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = a[..., 0] + (y - ay) * (b[..., 0] - a[..., 0]) / (by - ay)
        hits = straddle & (x < xcross)
        return (hits.sum(axis=1) % 2) == 1

    def distance_to_boundary(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        a = self.vertices[None]
        ab = self.edge_vectors()[None]
        ap = pts[:, None, :] - a
        t = np.clip((ap * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
        closest = a + t[..., None] * ab
        return np.linalg.norm(pts[:, None, :] - closest, axis=-1).min(axis=1)


def _line_intersection(p0, d0, p1, d1):
    denom = d0[0] * d1[1] - d0[1] * d1[0]
    w = p1 - p0
    s = (w[0] * d1[1] - w[1] * d1[0]) / denom
    return p0 + s * d0


def offset_edges(poly: Polygon2D, d) -> tuple[np.ndarray, np.ndarray]:
    """Inner endpoints (starts, ends) of every edge offset inward by ``d``.

    ``d`` is a scalar or one distance per edge. Consecutive edges that are not
    parallel meet at a miter point; collinear edges with different offsets get
    a perpendicular step.
    """
    pts = poly.vertices
    n = len(pts)
    dist = np.broadcast_to(np.asarray(d, dtype=np.float64), (n,)).copy()
    e = poly.edge_vectors() / poly.edge_lengths()[:, None]
    nrm = poly.inward_normals()
    starts = np.empty((n, 2))
    ends = np.empty((n, 2))
    for i in range(n):
        prev = (i - 1) % n
        ep, ei = e[prev], e[i]
        cross = ep[0] * ei[1] - ep[1] * ei[0]
        if abs(cross) > 1e-9:
            p = _line_intersection(pts[prev] + dist[prev] * nrm[prev], ep, pts[i] + dist[i] * nrm[i], ei)
            ends[prev] = p
            starts[i] = p
        else:
            ends[prev] = pts[i] + dist[prev] * nrm[prev]
            starts[i] = pts[i] + dist[i] * nrm[i]
    return starts, ends


def inset_polygon(poly: Polygon2D, d) -> Polygon2D:
    """Inward offset by ``d`` (scalar or per-edge) using miter joins.

    Raises InsetCollapse when any offset edge reverses, or the result is not a
    simple CCW polygon with positive area.
    """
    dist = np.asarray(d, dtype=np.float64)
    if np.any(dist <= 0):
        raise ValueError("inset distance must be positive")
    starts, ends = offset_edges(poly, dist)
    e = poly.edge_vectors()
    if np.any(((ends - starts) * e).sum(axis=1) <= 0):
        raise InsetCollapse("an offset edge reversed or vanished")
    out = []
    for s, t in zip(starts, ends):
        for p in (s, t):
            if not out or np.linalg.norm(p - out[-1]) > COINCIDENT_TOL:
                out.append(p)
    if len(out) > 1 and np.linalg.norm(out[0] - out[-1]) <= COINCIDENT_TOL:
        out.pop()
    try:
        return Polygon2D(np.array(out))
    except InvalidPolygon as exc:
        raise InsetCollapse(f"inset polygon is invalid: {exc}") from exc


def min_area_rectangle(poly: Polygon2D) -> np.ndarray:
    """Corners (4, 2), CCW, of the minimum-area enclosing rectangle.

    Candidate orientations are the polygon edge directions, tried in edge
    order so that ties resolve to the lowest edge index.
    """
    pts = poly.vertices
    best, best_area = None, np.inf
    for d in poly.edge_vectors() / poly.edge_lengths()[:, None]:
        n = np.array([-d[1], d[0]])
        u, v = pts @ d, pts @ n
        area = (u.max() - u.min()) * (v.max() - v.min())
        if area < best_area - 1e-12:
            best_area = area
            u0, u1, v0, v1 = u.min(), u.max(), v.min(), v.max()
            best = np.array([u0 * d + v0 * n, u1 * d + v0 * n, u1 * d + v1 * n, u0 * d + v1 * n])
    return best
