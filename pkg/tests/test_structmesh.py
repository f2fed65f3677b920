import json

import numpy as np
import pytest
from shapely.geometry import Polygon as ShapelyPolygon

from worldmesh.errors import OpeningOutsideWall
from worldmesh.fixtures import one_room, three_rooms, two_rooms
from worldmesh.floorplan import detect_shared_edges, parse_layout
from worldmesh.geom import TriMesh, box_mesh, raycast
from worldmesh.gltf import GLB_MAGIC, export_glb, glb_to_mesh, read_glb
from worldmesh.structmesh import (
    assemble_struct_mesh,
    build_floor_ceiling,
    build_room_walls,
    carve_openings,
    interior_polygon,
    wall_runs,
)


def parse(doc):
    return parse_layout(json.dumps(doc))


def square_room_doc(openings=()):
    doc = one_room()
    doc["rooms"][0]["floor_polygon"] = [[0, 0], [4, 0], [4, 4], [0, 4]]
    doc["rooms"][0]["openings"] = list(openings)
    return doc


def segment_is_clear(mesh, a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    d = b - a
    length = np.linalg.norm(d)
    hit = raycast(mesh, a, d / length)
    return hit is None or hit.t > length


def wall_face_hits(mesh, a, b):
    """Distances of every wall face crossing the segment a-b."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    d = (b - a) / np.linalg.norm(b - a)
    walls = mesh.select(mesh.category == "wall")
    hits = []
    origin = a
    travelled = 0.0
    while True:
        h = raycast(walls, origin, d)
        if h is None or travelled + h.t > np.linalg.norm(b - a):
            return hits
        travelled += h.t
        hits.append(travelled)
        origin = a + (travelled + 1e-6) * d
        travelled += 1e-6


# -- walls ---------------------------------------------------------------------------

def test_square_room_wall_volume():
    room = parse(square_room_doc()).rooms[0]
    h = room.ceiling_height
    walls = build_room_walls(room, 0.2)
    assert walls.volume() == pytest.approx((16 - 3.6 ** 2) * h, abs=1e-9)
    assert set(walls.category) == {"wall"} and set(walls.room) == {room.id}


def test_square_room_one_shared_edge():
    room = parse(square_room_doc()).rooms[0]
    h = room.ceiling_height
    walls = build_room_walls(room, 0.2, shared_edges={1})
    # inner rectangle spans x in [0.2, 3.9] and y in [0.2, 3.8]
    assert walls.volume() == pytest.approx((16 - 3.7 * 3.6) * h, abs=1e-9)


def test_partial_shared_edge_splits_wall_run():
    doc = two_rooms()
    doc["rooms"][1]["floor_polygon"] = [[4, 3], [8, 3], [8, 7], [4, 7]]
    doc["rooms"][0]["openings"] = []
    plan = parse(doc)
    shared = detect_shared_edges(plan)
    runs = [r for r in wall_runs(plan.room("living"), 0.2, shared) if r.edge == 1]
    assert [(r.s0, r.s1, r.thickness) for r in runs] == [
        (0.0, pytest.approx(3.0), 0.2), (pytest.approx(3.0), pytest.approx(4.0), 0.1)]
    # interior: 3.6 x 3.6 square plus a 0.1 m wide notch for y in [3.0, 3.8]
    h = plan.room("living").ceiling_height
    expected = (16 - (3.6 * 3.6 + 0.1 * 0.8)) * h
    assert build_room_walls(plan.room("living"), 0.2, shared).volume() == pytest.approx(expected, abs=1e-9)


def test_interior_polygon_three_rooms():
    plan = parse(three_rooms())
    shared = detect_shared_edges(plan)
    got = {r.id: np.round(interior_polygon(r, 0.2, shared).vertices, 9).tolist() for r in plan.rooms}
    assert got["A"] == [[0.2, 0.2], [4.9, 0.2], [4.9, 3.9], [0.2, 3.9]]
    assert got["C"] == [[0.2, 4.1], [8.8, 4.1], [8.8, 7.8], [0.2, 7.8]]


def test_walls_of_distinct_rooms_do_not_interpenetrate():
    plan = parse(three_rooms())
    shared = detect_shared_edges(plan)
    runs = {r.id: wall_runs(r, 0.2, shared) for r in plan.rooms}
    ids = list(runs)
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            for a in runs[ids[i]]:
                for b in runs[ids[j]]:
                    area = ShapelyPolygon(a.footprint()).intersection(ShapelyPolygon(b.footprint())).area
                    assert area * min(a.height, b.height) < 1e-4


# -- slabs --------------------------------------------------------------------------

def test_floor_slab_volume_and_top_plane():
    room = parse(square_room_doc()).rooms[0]
    slabs = build_floor_ceiling(room, 0.05)
    floor = slabs.select(slabs.category == "floor")
    assert floor.volume() == pytest.approx(0.8)
    assert floor.vertices[:, 2].max() == 0.0
    ceiling = slabs.select(slabs.category == "ceiling")
    assert ceiling.vertices[:, 2].min() == room.ceiling_height


def test_abutting_floor_slabs_do_not_overlap():
    plan = parse(two_rooms())
    a, b = (ShapelyPolygon(r.floor_polygon.vertices) for r in plan.rooms)
    assert a.intersection(b).area * 0.05 < 1e-4


# -- carving --------------------------------------------------------------------------

DOOR = {"kind": "door", "edge": 0, "offset": 1.0, "width": 0.9, "sill": 0.0, "head": 2.1}
WINDOW = {"kind": "window", "edge": 0, "offset": 1.0, "width": 1.2, "sill": 0.9, "head": 2.0}


def test_unshared_door_volume_delta():
    plan = parse(square_room_doc([DOOR]))
    room = plan.rooms[0]
    walls = build_room_walls(room, 0.2)
    carved = carve_openings(walls, plan)
    assert walls.volume() - carved.volume() == pytest.approx(0.9 * 0.2 * 2.1, abs=1e-9)


def test_window_sill_and_head():
    plan = parse(square_room_doc([WINDOW]))
    mesh = carve_openings(build_room_walls(plan.rooms[0], 0.2), plan)
    x = 1.6  # window center along edge 0 (y = 0 wall)
    assert not segment_is_clear(mesh, [x, 1.0, 0.5], [x, -1.0, 0.5])
    assert segment_is_clear(mesh, [x, 1.0, 1.5], [x, -1.0, 1.5])


def test_shared_door_carves_both_half_walls():
    plan = parse(two_rooms())
    mesh = assemble_struct_mesh(plan)
    # door on x = 4, y in [1.5, 2.4]
    assert wall_face_hits(mesh, [3.0, 1.95, 1.0], [5.0, 1.95, 1.0]) == []
    # two half walls: inner faces at x = 3.9 and 4.1, coincident outer faces at x = 4.0
    hits = wall_face_hits(mesh, [3.0, 0.8, 1.0], [5.0, 0.8, 1.0])
    assert hits == pytest.approx([0.9, 1.0, 1.1], abs=1e-5)


def test_room_centers_connected_through_door():
    mesh = assemble_struct_mesh(parse(two_rooms()))
    # centers (2, 2) and (6, 2); the line y = 2 passes through the door span
    assert segment_is_clear(mesh, [2, 2, 1.0], [6, 2, 1.0])


def test_every_door_is_clear_at_one_meter():
    for doc in (one_room(), two_rooms(), three_rooms()):
        plan = parse(doc)
        mesh = assemble_struct_mesh(plan)
        for room in plan.rooms:
            for op in room.openings:
                if op.kind == "window":
                    continue
                a, u, _ = room.edge_frame(op.edge)
                n = np.array([-u[1], u[0]])
                c = a + (op.offset + op.width / 2) * u
                p, q = c + 0.6 * n, c - 0.6 * n
                assert segment_is_clear(mesh, [*p, 1.0], [*q, 1.0]), (room.id, op)


def test_opening_outside_wall():
    plan = parse(two_rooms())
    walls = build_room_walls(plan.rooms[0], 0.2, detect_shared_edges(plan))
    with pytest.raises(OpeningOutsideWall):
        carve_openings(walls, plan)


# -- assembly --------------------------------------------------------------------------

def test_one_room_tag_partition():
    mesh = assemble_struct_mesh(parse(one_room()))
    assert set(mesh.category) == {"wall", "floor", "ceiling"}


# Hand-computed volumes (ceiling 2.8 m, wall 0.2 m, slabs 0.05 m):
#   one_room: annulus 24 - 5.6*3.6 = 3.84 -> 10.752; door 0.378, window 1.5*0.2*1.1 = 0.33;
#             slabs 2*24*0.05 = 2.4
#   two_rooms: annuli 2 * (16 - 3.7*3.6) * 2.8 = 15.008; door through both halves 0.378;
#              windows 2 * 1.2*0.2*1.1 = 0.528; slabs 2*32*0.05 = 3.2
#   three_rooms: annuli (20 - 4.7*3.7 + 16 - 3.7*3.7 + 36 - 8.6*3.7) * 2.8 = 25.48;
#              doors 2*0.378, passage 1.2*0.2*2.3, windows 1.6*0.2*1.2 + 1.2*0.2*1.0 + 2.0*0.2*1.4;
#              slabs 2*72*0.05 = 7.2
ANALYTIC_VOLUMES = {
    "one_room": 10.752 - 0.378 - 0.33 + 2.4,
    "two_rooms": 15.008 - 0.378 - 0.528 + 3.2,
    "three_rooms": 25.48 - 2 * 0.378 - 0.552 - (0.384 + 0.24 + 0.56) + 7.2,
}


@pytest.mark.parametrize("name,factory", [("one_room", one_room), ("two_rooms", two_rooms),
                                          ("three_rooms", three_rooms)])
def test_total_volume_analytic(name, factory):
    mesh = assemble_struct_mesh(parse(factory()))
    assert mesh.volume() == pytest.approx(ANALYTIC_VOLUMES[name], abs=1e-3)


def test_assembly_is_deterministic():
    plan = parse(three_rooms())
    a, b = assemble_struct_mesh(plan), assemble_struct_mesh(plan)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)
    assert a.digest() == b.digest()


# -- GLB -----------------------------------------------------------------------------------

def test_glb_cube_roundtrip(tmp_path):
    path = tmp_path / "cube.glb"
    export_glb(box_mesh([0, 0, 0], [1, 1, 1], room="r"), path)
    assert path.read_bytes()[:4] == GLB_MAGIC
    back = glb_to_mesh(path).deduplicated(1e-6)
    assert len(back.vertices) == 8 and back.n_faces == 12
    assert back.volume() == pytest.approx(1.0, abs=1e-6)


def test_glb_primitive_per_tag_group(tmp_path):
    mesh = assemble_struct_mesh(parse(two_rooms()))
    manifest = export_glb(mesh, tmp_path / "s.glb", manifest_path=tmp_path / "tags.json")
    doc, prims = read_glb(tmp_path / "s.glb")
    groups = sorted({(r, c, o) for r, c, o in zip(mesh.room, mesh.category, mesh.object_id)})
    assert len(prims) == len(groups) == 6
    assert [(p.extras["room_id"], p.extras["category"], p.extras["object_id"]) for p in prims] == groups
    assert json.loads((tmp_path / "tags.json").read_text()) == manifest
    assert sum(len(p.indices) for p in prims) == mesh.n_faces


def test_glb_object_texture(tmp_path):
    cube = box_mesh([0, 0, 0], [1, 1, 1], category="object", object_id="o1", room="r")
    uv = np.column_stack([cube.vertices[:, 0], cube.vertices[:, 1]])
    tex = np.zeros((4, 4, 3), np.uint8)
    tex[..., 0] = 200
    mesh = TriMesh(cube.vertices, cube.faces, cube.room, cube.category, cube.object_id, cube.surface,
                   uv=uv, textures={"o1": tex})
    export_glb(mesh, tmp_path / "o.glb")
    _, prims = read_glb(tmp_path / "o.glb")
    assert prims[0].image.shape == (4, 4, 3) and prims[0].image[0, 0, 0] == 200
    # glTF flips v
    np.testing.assert_allclose(prims[0].uv[:, 1], 1.0 - uv[:, 1], atol=1e-7)


def test_glb_to_mesh_restores_surfaces_and_object_textures(tmp_path):
    struct = assemble_struct_mesh(parse(two_rooms()))
    cube = box_mesh([1, 1, 0], [2, 2, 1], category="object", object_id="o1", room="living")
    tex = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 4, 3)
    uv = np.column_stack([cube.vertices[:, 0] - 1, cube.vertices[:, 1] - 1])
    cube = TriMesh(cube.vertices, cube.faces, cube.room, cube.category, cube.object_id, cube.surface,
                   uv=uv, textures={"o1": tex})
    mesh = TriMesh.merge([struct, cube])
    export_glb(mesh, tmp_path / "m.glb")
    back = glb_to_mesh(tmp_path / "m.glb")
    assert back.n_faces == mesh.n_faces
    key = lambda m: sorted(zip(m.room, m.category, m.object_id, m.surface, map(tuple, m.triangles.reshape(-1, 9).round(6))))
    assert key(back) == key(mesh)
    assert np.array_equal(back.textures["o1"], tex)
    obj = back.select(back.object_id == "o1")
    used = np.unique(obj.faces)
    np.testing.assert_allclose(obj.uv[used], obj.vertices[used][:, :2] - 1, atol=1e-6)
