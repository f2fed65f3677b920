"""Independent reference computations shared by several test modules."""

from __future__ import annotations

import json
import math

import numpy as np

from worldmesh.floorplan import parse_layout
from worldmesh.geom import raycast_batch
from worldmesh.geom.raycast import intersect_triangle
from worldmesh.structmesh import assemble_struct_mesh


def plan_and_mesh(doc: dict):
    plan = parse_layout(json.dumps(doc))
    return plan, assemble_struct_mesh(plan)


def raycast_depth(mesh, cam, px=None, py=None):
    """Per-pixel depth and face by casting one ray per pixel center."""
    if px is None:
        j, i = np.mgrid[0:cam.height, 0:cam.width]
        px, py = i.ravel() + 0.5, j.ravel() + 0.5
        shape = (cam.height, cam.width)
    else:
        shape = np.shape(px)
    dirs = cam.pixel_directions(np.ravel(px), np.ravel(py))
    t, face = raycast_batch(mesh, np.broadcast_to(cam.position, dirs.shape), dirs)
    depth = t * (dirs @ cam.forward)
    return depth.reshape(shape), face.reshape(shape)


def band_mask(depth: np.ndarray, jump: float = 0.1, band: int = 2) -> np.ndarray:
    """Pixels within ``band`` px (Chebyshev) of a 4-neighbour depth jump, written with plain loops."""
    h, w = depth.shape
    hit = np.isfinite(depth)
    edge = np.zeros((h, w), bool)
    for y in range(h):
        for x in range(w):
            for dy, dx in ((0, 1), (1, 0)):
                yy, xx = y + dy, x + dx
                if yy >= h or xx >= w:
                    continue
                if hit[y, x] != hit[yy, xx] or (hit[y, x] and abs(depth[y, x] - depth[yy, xx]) > jump):
                    edge[y, x] = edge[yy, xx] = True
    out = np.zeros_like(edge)
    for y, x in zip(*np.nonzero(edge)):
        out[max(0, y - band):y + band + 1, max(0, x - band):x + band + 1] = True
    return out


def window_recall(mesh_edges: np.ndarray, est_edges: np.ndarray, delta: int) -> float:
    """For each mesh-edge pixel, scan its (2*delta+1)^2 window for an estimated edge pixel."""
    h, w = mesh_edges.shape
    ys, xs = np.nonzero(mesh_edges)
    if len(ys) == 0:
        return 1.0
    matched = 0
    for y, x in zip(ys, xs):
        found = False
        for yy in range(max(0, y - delta), min(h, y + delta + 1)):
            for xx in range(max(0, x - delta), min(w, x + delta + 1)):
                if est_edges[yy, xx]:
                    found = True
                    break
            if found:
                break
        matched += found
    return matched / len(ys)


def brute_force_raycast(mesh, origin, direction):
    """Nearest hit (t, face) by testing every triangle in index order; None on a miss."""
    best = None
    for i, tri in enumerate(mesh.triangles.tolist()):
        hit = intersect_triangle(origin.tolist(), direction.tolist(), *tri)
        if hit is not None and (best is None or hit[0] < best[0]):
            best = (hit[0], i)
    return best


def greedy_oracle(quats, b0, b1):
    """Naive re-run of the selection rule with plain Python arithmetic."""
    def unit(q):
        n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
        return [c / n for c in q]

    qs = [unit([float(c) for c in q]) for q in quats]

    def sim(i, j):
        a, c = qs[i], qs[j]
        return min(1.0, abs(a[0] * c[0] + a[1] * c[1] + a[2] * c[2] + a[3] * c[3]))

    order = [b0, b1]
    refs = [None, 0]
    while len(order) < len(qs):
        best = None
        for j in range(len(qs)):
            if j in order:
                continue
            scores = [sim(j, order[p]) for p in range(len(order))]
            top = max(scores)
            if best is None or top > best[0]:
                best = (top, j, scores.index(top))
        order.append(best[1])
        refs.append(best[2])
    return order, refs
