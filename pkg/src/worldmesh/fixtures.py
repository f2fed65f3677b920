"""Small reference layouts used by the test suite and the mock layout provider."""

from __future__ import annotations

import json

from worldmesh.floorplan import LAYOUT_VERSION


def _rect(x0, y0, x1, y1):
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]


def one_room(width: float = 6.0, depth: float = 4.0, height: float = 2.8) -> dict:
    return {
        "version": LAYOUT_VERSION,
        "theme": "a bright scandinavian bedroom",
        "wall_thickness": 0.2,
        "rooms": [
            {
                "id": "bedroom",
                "kind": "bedroom",
                "ceiling_height": height,
                "floor_polygon": _rect(0, 0, width, depth),
                "openings": [
                    {"kind": "door", "edge": 0, "offset": 1.0, "width": 0.9, "sill": 0.0, "head": 2.1},
                    {"kind": "window", "edge": 2, "offset": 2.0, "width": 1.5, "sill": 0.9, "head": 2.0},
                ],
            }
        ],
    }


def two_rooms() -> dict:
    """Two 4 x 4 rooms sharing the wall x = 4, joined by one door."""
    return {
        "version": LAYOUT_VERSION,
        "theme": "a cozy mid-century apartment",
        "wall_thickness": 0.2,
        "rooms": [
            {
                "id": "living",
                "kind": "living room",
                "ceiling_height": 2.8,
                "floor_polygon": _rect(0, 0, 4, 4),
                "openings": [
                    {"kind": "door", "edge": 1, "offset": 1.5, "width": 0.9, "sill": 0.0, "head": 2.1},
                    {"kind": "window", "edge": 3, "offset": 1.0, "width": 1.2, "sill": 0.9, "head": 2.0},
                ],
            },
            {
                "id": "kitchen",
                "kind": "kitchen",
                "ceiling_height": 2.8,
                "floor_polygon": _rect(4, 0, 8, 4),
                "openings": [
                    {"kind": "window", "edge": 1, "offset": 1.4, "width": 1.2, "sill": 0.9, "head": 2.0},
                ],
            },
        ],
    }


def three_rooms() -> dict:
    """Rooms A | B side by side below a long room C.

    C's bottom edge is shared partly with A and partly with B, so it is split
    at the T-junction. Doors connect A-B and A-C; B reaches C through a passage.
    """
    return {
        "version": LAYOUT_VERSION,
        "theme": "a warm rustic farmhouse",
        "wall_thickness": 0.2,
        "rooms": [
            {
                "id": "A",
                "kind": "living room",
                "ceiling_height": 2.8,
                "floor_polygon": _rect(0, 0, 5, 4),
                "openings": [
                    {"kind": "door", "edge": 1, "offset": 1.5, "width": 0.9, "sill": 0.0, "head": 2.1},
                    {"kind": "door", "edge": 2, "offset": 1.0, "width": 0.9, "sill": 0.0, "head": 2.1},
                    {"kind": "window", "edge": 0, "offset": 1.5, "width": 1.6, "sill": 0.9, "head": 2.1},
                ],
            },
            {
                "id": "B",
                "kind": "kitchen",
                "ceiling_height": 2.8,
                "floor_polygon": _rect(5, 0, 9, 4),
                "openings": [
                    {"kind": "passage", "edge": 2, "offset": 1.0, "width": 1.2, "sill": 0.0, "head": 2.3},
                    {"kind": "window", "edge": 1, "offset": 1.0, "width": 1.2, "sill": 1.0, "head": 2.0},
                ],
            },
            {
                "id": "C",
                "kind": "bedroom",
                "ceiling_height": 2.8,
                "floor_polygon": _rect(0, 4, 9, 8),
                "openings": [
                    {"kind": "window", "edge": 2, "offset": 3.0, "width": 2.0, "sill": 0.8, "head": 2.2},
                ],
            },
        ],
    }


FIXTURES = {"one_room": one_room, "two_rooms": two_rooms, "three_rooms": three_rooms}


def fixture_document(name: str) -> str:
    return json.dumps(FIXTURES[name](), indent=2)


# -- furniture ------------------------------------------------------------------------------

# (label, size xyz, world center xy, base z before settling, yaw deg, tilt deg) for the
# 6 x 4 m one_room layout. Poses are deliberately imperfect: floating, tilted, one
# piece poking into a wall and one pair overlapping, as a reconstruction would give.
FURNISHED_ROOM = [
    ("rug", (2.0, 1.4, 0.02), (1.6, 2.2), 0.05, 0.0, 1.0),
    ("sofa", (2.0, 0.9, 0.8), (1.5, 3.1), 0.3, 0.0, 3.0),
    ("coffee table", (1.0, 0.6, 0.4), (1.6, 2.1), 0.12, 2.0, 2.0),
    ("book", (0.3, 0.2, 0.05), (1.6, 2.1), 0.65, 15.0, 1.5),
    ("armchair", (0.8, 0.8, 0.9), (2.7, 3.05), 0.1, 0.0, 2.5),
    ("bookshelf", (1.0, 0.35, 1.8), (4.5, 3.7), 0.02, 0.0, 1.0),
    ("floor lamp", (0.4, 0.4, 1.6), (0.55, 0.65), 0.2, 0.0, 4.0),
    ("painting", (1.0, 0.05, 0.7), (3.0, 0.45), 1.2, 0.0, 0.0),
    ("mirror", (0.04, 0.6, 1.0), (5.45, 2.0), 1.0, 0.0, 0.0),
    ("pendant lamp", (0.5, 0.5, 0.4), (3.0, 2.0), 1.9, 0.0, 2.0),
    ("side table", (0.5, 0.5, 0.55), (0.55, 1.6), 0.08, 10.0, 3.0),
    ("plant", (0.4, 0.4, 1.0), (5.2, 0.7), 0.15, 0.0, 5.0),
]


def _palette_color(k: int) -> tuple[int, int, int]:
    return ((53 * k + 90) % 256, (97 * k + 40) % 256, (151 * k + 200) % 256)


def textured_box(size, object_id: str, color=(180, 120, 80)):
    """Box centered at the origin with a 4x4 texture whose texels vary across the faces."""
    import numpy as np

    from worldmesh.geom.mesh import box_mesh

    half = np.asarray(size, float) / 2
    box = box_mesh(-half, half, category="object", object_id=object_id)
    uv = (box.vertices[:, :2] / (2 * half[:2]) + 0.5) * 0.98 + 0.01
    tex = np.zeros((4, 4, 3), dtype=np.uint8)
    tex[:] = color
    tex[::2, ::2] = np.clip(np.asarray(color) + 30, 0, 255)
    return type(box)(box.vertices, box.faces, box.room, box.category, box.object_id, box.surface,
                     uv=uv, textures={object_id: tex})


def furniture_pose(spec):
    """World rotation and translation for one FURNISHED_ROOM entry."""
    import math

    import numpy as np

    label, size, (x, y), base, yaw, tilt = spec
    cy, sy = math.cos(math.radians(yaw)), math.sin(math.radians(yaw))
    ct, st = math.cos(math.radians(tilt)), math.sin(math.radians(tilt))
    r_yaw = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    r_tilt = np.array([[1, 0, 0], [0, ct, -st], [0, st, ct]])
    return r_yaw @ r_tilt, np.array([x, y, base + size[2] / 2])


def furnished_room_objects(cam, room_id: str = "bedroom", specs=FURNISHED_ROOM):
    """ReconstructedObjects for the furniture table, posed in ``cam``'s frame."""
    from worldmesh.objects import object_from_world_pose

    out = []
    for k, spec in enumerate(specs):
        oid = f"{room_id}/obj{k:02d}"
        rot, trans = furniture_pose(spec)
        mesh = textured_box(spec[1], oid, _palette_color(k)).with_tags(room=room_id)
        out.append(object_from_world_pose(oid, spec[0], mesh, rot, trans, cam))
    return out
