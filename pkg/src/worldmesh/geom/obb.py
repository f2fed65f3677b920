"""Oriented bounding boxes from area-weighted surface covariance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from worldmesh.errors import EmptyMesh
from worldmesh.geom.mesh import TriMesh

_CANDIDATE_FACES = 16


@dataclass(frozen=True, eq=False)
class Obb:
    center: np.ndarray
    axes: np.ndarray  # rows are the unit axes, right-handed
    half_extents: np.ndarray

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return self.center + (signs * self.half_extents) @ self.axes

    def face_normals(self) -> np.ndarray:
        """Outward normals of the six faces: +a0, -a0, +a1, -a1, +a2, -a2."""
        return np.concatenate([[a, -a] for a in self.axes])

    @property
    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        local = (np.atleast_2d(points) - self.center) @ self.axes.T
        return np.all(np.abs(local) <= self.half_extents + tol, axis=1)


def surface_covariance(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of points drawn uniformly from the surface."""
    tri = mesh.triangles
    area = mesh.face_areas()
    total = area.sum()
    s = tri.sum(axis=1)
    mean = (area[:, None] * s).sum(axis=0) / (3.0 * total)
    # per-triangle second moment: (sum_i v_i v_i^T + s s^T) / 12
    second = np.einsum("tki,tkj->tij", tri, tri) + np.einsum("ti,tj->tij", s, s)
    m2 = (area[:, None, None] * second).sum(axis=0) / (12.0 * total)
    return mean, m2 - np.outer(mean, mean)


def _right_handed(axes: np.ndarray) -> np.ndarray:
    axes = axes.copy()
    axes[0] /= np.linalg.norm(axes[0])
    axes[1] -= (axes[1] @ axes[0]) * axes[0]
    axes[1] /= np.linalg.norm(axes[1])
    axes[2] = np.cross(axes[0], axes[1])
    return axes


def _fit(points: np.ndarray, axes: np.ndarray) -> Obb:
    local = points @ axes.T
    lo, hi = local.min(axis=0), local.max(axis=0)
    return Obb(((lo + hi) / 2.0) @ axes, axes, (hi - lo) / 2.0)


def oriented_bounding_box(mesh: TriMesh) -> Obb:
    """PCA box over the area-weighted surface, refined with face-normal frames.

    The principal frame is ambiguous when eigenvalues coincide (cubes,
    spheres), so frames aligned with the largest faces are also fitted and the
    smallest-volume box wins; the PCA frame wins ties.
    """
    if mesh.n_faces == 0:
        raise EmptyMesh("cannot bound an empty mesh")
    pts = mesh.vertices[np.unique(mesh.faces)]
    areas = mesh.face_areas()
    if areas.sum() <= 0:
        raise EmptyMesh("mesh has zero surface area")
    _, cov = surface_covariance(mesh)
    _, vecs = np.linalg.eigh(cov)
    best = _fit(pts, _right_handed(vecs[:, ::-1].T.copy()))

    normals = mesh.face_normals()
    tri = mesh.triangles
    order = np.argsort(-areas, kind="stable")[:_CANDIDATE_FACES]
    for i in order:
        n = normals[i]
        e = tri[i, 1] - tri[i, 0]
        e = e - (e @ n) * n
        if np.linalg.norm(e) < 1e-12:
            continue
        axes = _right_handed(np.array([n, e / np.linalg.norm(e), np.zeros(3)]))
        box = _fit(pts, axes)
        if box.volume < best.volume * (1 - 1e-9) - 1e-15:
            best = box
    return best
