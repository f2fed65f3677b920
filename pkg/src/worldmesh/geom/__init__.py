"""Computational-geometry kernel: polygons, tagged meshes, CSG, OBBs, ray casting."""

from worldmesh.geom.boolean import mesh_subtract
from worldmesh.geom.distance import closest_points, distance_to_mesh
from worldmesh.geom.mesh import CATEGORIES, STRUCTURAL, TriMesh, box_mesh, prism_mesh
from worldmesh.geom.obb import Obb, oriented_bounding_box
from worldmesh.geom.polygon import Polygon2D, inset_polygon, min_area_rectangle, offset_edges
from worldmesh.geom.raycast import RayHit, intersect_triangle, raycast, raycast_batch

__all__ = [
    "CATEGORIES",
    "STRUCTURAL",
    "Obb",
    "Polygon2D",
    "RayHit",
    "TriMesh",
    "box_mesh",
    "closest_points",
    "distance_to_mesh",
    "inset_polygon",
    "intersect_triangle",
    "mesh_subtract",
    "min_area_rectangle",
    "offset_edges",
    "oriented_bounding_box",
    "prism_mesh",
    "raycast",
    "raycast_batch",
]
