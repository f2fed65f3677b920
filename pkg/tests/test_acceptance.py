"""Acceptance criteria 1-10, one test each; the terminal summary prints PASS/FAIL per criterion.

Every criterion runs with the deterministic mock adapters. Wall-clock budgets are
asserted alongside the correctness checks.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter, minimum_filter
from scipy.spatial.transform import Rotation
from shapely.geometry import LineString, Point, Polygon
from skimage.metrics import structural_similarity

from oracles import band_mask, brute_force_raycast, greedy_oracle, plan_and_mesh, raycast_depth, window_recall
from worldmesh.cameras import make_camera, perimeter_count, quat_similarity, room_cameras, schedule_synthesis
from worldmesh.fixtures import FURNISHED_ROOM, fixture_document, furnished_room_objects, one_room, three_rooms, two_rooms
from worldmesh.floorplan import detect_shared_edges, parse_layout
from worldmesh.geom import TriMesh, box_mesh, mesh_subtract, raycast, raycast_batch
from worldmesh.geom.distance import distance_to_mesh
from worldmesh.geom.obb import oriented_bounding_box
from worldmesh.objects import build_m_geo, level_to_ground
from worldmesh.pipeline import RunConfig, run_generate
from worldmesh.recon import backproject, dssim, loss_eval
from worldmesh.render import render_depth
from worldmesh.structmesh import assemble_struct_mesh, interior_polygon, wall_runs
from worldmesh.texproj import build_atlas, project_image
from worldmesh.verify import EdgeMap, edge_recall


@pytest.fixture
def criterion(record_property):
    def tag(n, title):
        record_property("criterion", n)
        record_property("criterion_title", title)
        return time.perf_counter()
    return tag


def views(plan, step, width, height):
    out = []
    for room in plan.rooms:
        cams = room_cameras(room, interior_polygon(room, plan.wall_thickness, detect_shared_edges(plan)))
        out += [c.with_image(width, height, 60.0) for c in cams[::step]]
    return out


# -- 1 ----------------------------------------------------------------------------------------------

def _mt_numpy(tris, origin, direction, eps=1e-12):
    """Vectorized Moller-Trumbore over all triangles for one ray: nearest (t, face) or None."""
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origin - v0
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = (q @ direction) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)
    if not hit.any():
        return None
    t = np.where(hit, t, np.inf)
    i = int(np.argmin(t))
    return float(t[i]), i


def test_criterion_1_geometry_kernel(criterion):
    start = criterion(1, "geometry kernel: subtraction volumes and ray casting against per-triangle oracle")
    # five subtraction fixtures; expected volume = |base| - |base & cutter| for axis-aligned boxes
    fixtures = [
        (([0, 0, 0], [1, 1, 1]), ([0.25] * 3, [0.75] * 3)),              # interior cavity
        (([0, 0, 0], [1, 1, 1]), ([0.5, 0.5, 0.5], [1.5, 1.5, 1.5])),    # corner bite
        (([0, 0, 0], [2, 1, 1]), ([0.5, -1, 0.2], [1.0, 2.0, 0.7])),     # through-hole
        (([0, 0, 0], [1, 1, 1]), ([-1, -1, 0.5], [2, 2, 2])),            # slice off the top
        (([0, 0, 0], [4, 0.1, 2.6]), ([1.0, -0.05, 0.0], [1.9, 0.15, 2.1])),  # door flush with the floor
    ]
    for (blo, bhi), (clo, chi) in fixtures:
        inter = float(np.prod(np.clip(np.minimum(bhi, chi) - np.maximum(blo, clo), 0, None)))
        expected = float(np.prod(np.subtract(bhi, blo))) - inter
        out = mesh_subtract(box_mesh(blo, bhi), box_mesh(clo, chi))
        assert abs(out.volume() - expected) <= 1e-6, (blo, bhi, clo, chi)

    wall = mesh_subtract(box_mesh([0, 0, 0], [4, 0.2, 2.6]), box_mesh([1, -0.1, 0], [1.9, 0.3, 2.1]))
    scene = TriMesh.merge([wall, box_mesh([0.5, 1, 0], [1.5, 2, 1]), box_mesh([2, 1.5, 0.5], [3, 2.5, 1.5])])
    rng = np.random.default_rng(2024)
    origins = rng.uniform(-1, 4, (10_000, 3))
    dirs = rng.normal(size=(10_000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t, face = raycast_batch(scene, origins, dirs)
    tris = scene.triangles
    hits = 0
    for k in range(len(origins)):
        ref = brute_force_raycast(scene, origins[k], dirs[k])
        assert (t[k], face[k]) == ((ref[0], ref[1]) if ref else (np.inf, -1)), k
        # second route: an independent vectorized intersection agrees to rounding
        alt = _mt_numpy(tris, origins[k], dirs[k])
        assert (alt is None) == (ref is None)
        if ref:
            hits += 1
            assert alt[1] == ref[1] and abs(alt[0] - ref[0]) < 1e-9
        if k % 10 == 0:
            single = raycast(scene, origins[k], dirs[k])
            assert (single is None) == (ref is None)
            assert single is None or (single.t, single.face_index) == ref
    assert hits > 1000
    assert time.perf_counter() - start < 10.0


# -- 2 ----------------------------------------------------------------------------------------------

def _shapely_shared(plan, tol=0.01, min_overlap=0.1):
    """Antiparallel edge pairs of distinct rooms where >= min_overlap of one edge lies within tol of the other."""
    out = set()
    for ia, ra in enumerate(plan.rooms):
        for rb in plan.rooms[ia + 1:]:
            pa, pb = ra.floor_polygon.vertices, rb.floor_polygon.vertices
            for ea in range(len(pa)):
                a = LineString([pa[ea], pa[(ea + 1) % len(pa)]])
                for eb in range(len(pb)):
                    b = LineString([pb[eb], pb[(eb + 1) % len(pb)]])
                    da = np.subtract(a.coords[1], a.coords[0]) / a.length
                    db = np.subtract(b.coords[1], b.coords[0]) / b.length
                    if da @ db > -0.999:
                        continue
                    near_a = a.intersection(b.buffer(tol, cap_style=2))
                    near_b = b.intersection(a.buffer(tol, cap_style=2))
                    if min(near_a.length, near_b.length) >= min_overlap:
                        out.add((ra.id, ea, rb.id, eb))
    return out


def _shift_room(doc, rid, dx):
    doc = json.loads(json.dumps(doc))
    for room in doc["rooms"]:
        if room["id"] == rid:
            room["floor_polygon"] = [[x + dx, y] for x, y in room["floor_polygon"]]
    return doc


def _clear(mesh, a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    length = float(np.linalg.norm(b - a))
    hit = raycast(mesh, a, (b - a) / length)
    return hit is None or hit.t > length


def test_criterion_2_structural_mesh(criterion):
    start = criterion(2, "structural mesh: shared edges, door clearance, analytic volume, bit-identical rerun")
    doc = three_rooms()
    plan = parse_layout(json.dumps(doc))
    # (a) A|B share x = 5; C's bottom edge is shared with both A and B (hand-derived)
    got = {(s.room_a, s.edge_a, s.room_b, s.edge_b) for s in detect_shared_edges(plan)}
    assert got == {("A", 1, "B", 3), ("A", 2, "C", 0), ("B", 2, "C", 0)}
    assert got == _shapely_shared(plan)
    for dx, expect_ab in ((0.005, True), (0.0099, True), (0.02, False), (0.05, False)):
        moved = parse_layout(json.dumps(_shift_room(doc, "B", dx)))
        pairs = {(s.room_a, s.edge_a, s.room_b, s.edge_b) for s in detect_shared_edges(moved)}
        assert (("A", 1, "B", 3) in pairs) == expect_ab, dx
        assert pairs == _shapely_shared(moved), dx

    # (b) a horizontal ray at z = 1.0 m crosses every door and passage centre line unobstructed
    mesh = assemble_struct_mesh(plan)
    checked = 0
    for room in plan.rooms:
        for op in room.openings:
            if op.kind == "window":
                continue
            a, u, _ = room.edge_frame(op.edge)
            n = np.array([-u[1], u[0]])
            c = a + (op.offset + op.width / 2) * u
            assert _clear(mesh, [*(c + 0.6 * n), 1.0], [*(c - 0.6 * n), 1.0]), (room.id, op)
            checked += 1
    assert checked == 6  # three connections, each opening listed on both rooms after propagation

    # (c) hand-computed: wall annuli (shared edges at half thickness) minus openings, plus slabs
    h, slab = 2.8, 0.05
    annuli = (20 - 4.7 * 3.7 + 16 - 3.7 * 3.7 + 36 - 8.6 * 3.7) * h
    doors = 2 * 0.9 * 0.2 * 2.1
    passage = 1.2 * 0.2 * 2.3
    windows = 1.6 * 0.2 * 1.2 + 1.2 * 0.2 * 1.0 + 2.0 * 0.2 * 1.4
    slabs = 2 * 72 * slab
    assert abs(mesh.volume() - (annuli - doors - passage - windows + slabs)) <= 1e-3

    # (d) bit-identical on re-run
    again = assemble_struct_mesh(parse_layout(fixture_document("three_rooms")))
    assert again.vertices.tobytes() == mesh.vertices.tobytes() and again.faces.tobytes() == mesh.faces.tobytes()
    assert again.digest() == mesh.digest()
    assert time.perf_counter() - start < 30.0


# -- 3 ----------------------------------------------------------------------------------------------

def test_criterion_3_camera_scheduling(criterion):
    criterion(3, "camera scheduling: greedy schedule vs brute-force oracle, quaternion similarity hand values")
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(2, 11))
        quats = rng.normal(size=(n, 4))
        b0, b1 = (int(i) for i in rng.choice(n, 2, replace=False))
        sched = schedule_synthesis(quats, [b0, b1])
        order, refs = greedy_oracle(quats, b0, b1)
        assert list(sched.order) == order and list(sched.style_ref) == refs

    def yaw(deg):
        return [math.cos(math.radians(deg) / 2), 0.0, 0.0, math.sin(math.radians(deg) / 2)]

    assert abs(quat_similarity([1, 0, 0, 0], yaw(90)) - 0.70711) <= 1e-5
    assert quat_similarity(yaw(30), yaw(30)) == pytest.approx(1.0, abs=1e-15)
    assert quat_similarity(yaw(30), [-c for c in yaw(30)]) == pytest.approx(1.0, abs=1e-15)  # double cover
    assert quat_similarity([1, 0, 0, 0], yaw(180)) == pytest.approx(0.0, abs=1e-15)
    assert quat_similarity([1, 0, 0, 0], yaw(60)) == pytest.approx(math.sqrt(3) / 2, abs=1e-12)


# -- 4 ----------------------------------------------------------------------------------------------

def test_criterion_4_rasterizer_vs_raycast(criterion):
    start = criterion(4, "rasterizer depth within 1e-3 m of ray casting on >= 99% of non-discontinuity pixels")
    plan, mesh = plan_and_mesh(two_rooms())
    cams = views(plan, 5, 344, 192)
    assert len(cams) == 12
    agree = total = 0
    for cam in cams:
        depth = render_depth(mesh, cam).values
        ref, _ = raycast_depth(mesh, cam)
        keep = ~band_mask(ref)
        both = np.isfinite(depth) & np.isfinite(ref)
        close = ~np.isfinite(depth) & ~np.isfinite(ref)
        close[both] = np.abs(depth[both] - ref[both]) < 1e-3
        frac = close[keep].mean()
        assert frac >= 0.99, (cam.id, frac)
        agree += int(close[keep].sum())
        total += int(keep.sum())
    assert agree / total >= 0.99
    assert time.perf_counter() - start < 60.0


# -- 5 ----------------------------------------------------------------------------------------------

def _shadow_oracle(chart, cam, ref_depth, tau):
    """Texels in view of ``cam`` that fail the occlusion rule against a ray-cast depth map.

    A texel in view faces the camera, lies on real surface and projects inside the image.
    It is shadowed when its camera depth differs from the depth at its pixel by more than
    tau, or lies more than tau behind the nearest depth in the 3x3 pixel neighbourhood.
    """
    nearest = minimum_filter(ref_depth, size=3, mode="nearest")
    centers = chart.texel_centers()
    nv, nu = chart.shape
    in_view = np.zeros((nv, nu), bool)
    shadow = np.zeros((nv, nu), bool)
    for r in range(nv):
        for c in range(nu):
            p = centers[r, c]
            to_cam = cam.position - p
            if not chart.mask[r, c] or to_cam @ chart.normal <= 0:
                continue
            px, py, d = cam.project(p[None])
            px, py, d = float(px[0]), float(py[0]), float(d[0])
            if not (d > 0 and 0 <= px < cam.width and 0 <= py < cam.height):
                continue
            in_view[r, c] = True
            z = ref_depth[int(py), int(px)]
            shadow[r, c] = not (np.isfinite(z) and abs(d - z) <= tau and d <= nearest[int(py), int(px)] + tau)
    return in_view, shadow


def test_criterion_5_projective_texturing(criterion):
    criterion(5, "projective texturing: exact occlusion shadow at tau = 0.10 m, room isolation, monotone coverage")
    tau = 0.10
    doc = one_room()
    doc["rooms"][0]["openings"] = []
    plan, struct = plan_and_mesh(doc)
    # east wall inner face at x = 5.8; box front face 1 m before it
    box = box_mesh([4.3, 1.5, 0.0], [4.8, 2.5, 1.2], category="object", object_id="box", room="bedroom")
    scene = TriMesh.merge([struct, box])
    cam = make_camera([1.0, 2.0, 1.4], [1, 0, 0], role="perimeter", room_id="bedroom", width=192, height=128,
                      fov_deg=90.0)
    image = np.full((cam.height, cam.width, 3), 100, np.uint8)
    ref, _ = raycast_depth(scene, cam)
    # the filter reads whatever depth map it is given; feed it the ray-cast one for an exact comparison
    atlas = project_image(scene, cam, image, ref, "bedroom", build_atlas(plan), tau)
    east = atlas.charts["bedroom/wall/1"]
    in_view, shadow = _shadow_oracle(east, cam, ref, tau)
    written = east.confidence > 0
    assert shadow.sum() > 1000
    assert np.array_equal(in_view & ~written, shadow)
    assert not (written & ~in_view).any()
    # with rasterized depth only silhouette pixels may flip, a handful of texels at most
    raster = project_image(scene, cam, image, render_depth(scene, cam), "bedroom", build_atlas(plan), tau)
    flipped = (raster.charts["bedroom/wall/1"].confidence > 0) != written
    assert flipped.sum() <= 0.005 * in_view.sum()

    # room isolation: kitchen texels are bitwise identical whatever the living room receives
    plan2, mesh2 = plan_and_mesh(two_rooms())
    cams2 = {r.id: [c.with_image(96, 54, 60.0) for c in room_cameras(r, interior_polygon(r, 0.2))[::6]]
             for r in plan2.rooms}

    def run(order, shade):
        a = build_atlas(plan2)
        for rid in order:
            for c in cams2[rid]:
                img = np.full((c.height, c.width, 3), shade[rid], np.uint8)
                a = project_image(mesh2, c, img, render_depth(mesh2, c), rid, a)
        return a

    runs = [run(["living", "kitchen"], {"living": 40, "kitchen": 200}), run(["kitchen"], {"kitchen": 200}),
            run(["living", "kitchen"], {"living": 90, "kitchen": 200})]
    kitchen = [sid for sid, ch in runs[0].charts.items() if ch.room == "kitchen"]
    assert kitchen and runs[0].room_coverage("living") > 0
    for sid in kitchen:
        for other in runs[1:]:
            assert runs[0].charts[sid].rgb.tobytes() == other.charts[sid].rgb.tobytes()
            assert runs[0].charts[sid].confidence.tobytes() == other.charts[sid].confidence.tobytes()

    # coverage never decreases over a 5-view accumulation
    room = plan.rooms[0]
    a = build_atlas(plan)
    prev, coverage = {k: c.confidence.copy() for k, c in a.charts.items()}, [a.coverage()]
    for c in room_cameras(room, interior_polygon(room, 0.2))[::5][:5]:
        c = c.with_image(96, 54, 60.0)
        a = project_image(scene, c, np.full((54, 96, 3), 120, np.uint8), render_depth(scene, c), "bedroom", a)
        for sid, ch in a.charts.items():
            assert (ch.confidence >= prev[sid]).all()
            prev[sid] = ch.confidence.copy()
        coverage.append(a.coverage())
    assert len(coverage) == 6
    assert all(x <= y for x, y in zip(coverage, coverage[1:])) and coverage[-1] > coverage[0]


# -- 6 ----------------------------------------------------------------------------------------------

def test_criterion_6_verification_math(criterion):
    criterion(6, "verification: edge recall vs window oracle, line fixture, monotone in delta")
    rng = np.random.default_rng(6)
    fixtures = []
    for _ in range(20):
        mesh = EdgeMap(rng.random((128, 128)) < rng.uniform(0.002, 0.03))
        est = EdgeMap(rng.random((128, 128)) < rng.uniform(0.0005, 0.01))
        fixtures.append((mesh, est))
        assert edge_recall(mesh, est, 10) == window_recall(mesh.mask, est.mask, 10)
    line = lambda col: EdgeMap(np.pad(np.ones((100, 1), bool), ((14, 14), (col, 127 - col))))
    assert line(50).count == 100
    assert edge_recall(line(50), line(58), 10) == 1.0
    assert edge_recall(line(50), line(61), 10) == 0.0
    for mesh, est in fixtures:
        values = [edge_recall(mesh, est, d) for d in range(0, 21)]
        assert all(a <= b for a, b in zip(values, values[1:]))


# -- 7 ----------------------------------------------------------------------------------------------

def _pair(seed, shape=(48, 64, 3)):
    rng = np.random.default_rng(seed)
    a = gaussian_filter(rng.uniform(0, 1, shape), (2, 2, 0))
    return a, np.clip(a + rng.normal(0, 0.05 * (seed + 1), shape), 0, 1)


def test_criterion_7_loss_arithmetic(criterion):
    criterion(7, "loss: identity is zero, uniform depth offset weighted by 0.7, DSSIM vs reference")
    a, _ = _pair(0)
    d = np.random.default_rng(1).uniform(1, 4, a.shape[:2])
    assert loss_eval(a, a, d, d).total == 0
    for offset in (0.01, 0.25, 0.5, 1.3):
        assert abs(loss_eval(a, a, d, d + offset).total - 0.7 * offset) <= 1e-9
    for seed in range(5):
        x, y = _pair(seed)
        ref = 1 - structural_similarity(x, y, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                        data_range=1.0, channel_axis=2)
        assert abs(dssim(x, y) - ref) <= 1e-6


# -- 8 ----------------------------------------------------------------------------------------------

def test_criterion_8_backprojection_closure(criterion):
    start = criterion(8, "render then backproject: stride-4 points within 1e-3 m of the mesh")
    for factory in (two_rooms, three_rooms):
        plan, mesh = plan_and_mesh(factory())
        for cam in views(plan, 7, 344, 192):
            pc = backproject(render_depth(mesh, cam), cam, stride=4, exclude_bands=True)
            dist, _ = distance_to_mesh(pc.points, mesh)
            assert len(pc) > 1000
            assert (dist <= 1e-3).all(), (factory.__name__, cam.id, float(dist.max()))
    assert time.perf_counter() - start < 30.0


# -- 9 ----------------------------------------------------------------------------------------------

def test_criterion_9_object_placement(criterion):
    criterion(9, "placement: support contact, wall non-penetration, conflict area, leveling")
    plan, struct = plan_and_mesh(one_room())
    room = plan.rooms[0]
    cams = room_cameras(room, interior_polygon(room, plan.wall_thickness))
    objs = furnished_room_objects(cams[0])
    assert len(objs) == len(FURNISHED_ROOM) == 12
    m_geo, (report,) = build_m_geo(plan, struct, {room.id: objs})
    assert len(report.placed) == 12 and report.skipped == []

    def bounds(oid):
        v = m_geo.vertices[np.unique(m_geo.faces[m_geo.object_id == oid])]
        return v.min(axis=0), v.max(axis=0)

    for p in report.placed:
        lo, hi = bounds(p["object_id"])
        sup = p["support_id"]
        if p["placement_class"] in ("floor_standing", "flat"):
            height = 0.0 if sup == "floor" else bounds(sup)[1][2]
            assert abs(lo[2] - height) <= 1e-3, p["label"]
        elif p["placement_class"] == "ceiling_hung":
            assert abs(hi[2] - room.ceiling_height) <= 1e-3, p["label"]
        else:
            assert sup.startswith(f"{room.id}/wall/")

    quads = [Polygon([r.outer[0], r.outer[1], r.inner[1], r.inner[0]]).buffer(-1e-3, join_style=2)
             for r in wall_runs(room, plan.wall_thickness)]
    obj_vertices = m_geo.vertices[np.unique(m_geo.faces[m_geo.category == "object"])]
    for v in obj_vertices:
        assert not any(q.contains(Point(v[0], v[1])) for q in quads), v

    assert report.overlap_before > 0
    assert report.overlap_after <= report.overlap_before

    down = np.array([0.0, 0.0, -1.0])
    box = box_mesh([-0.5, -0.3, -0.15], [0.5, 0.3, 0.15], category="object", object_id="o")
    for seed in range(20):
        tilted = box.transformed(Rotation.random(random_state=seed).as_matrix(), [1.0, 2.0, 0.5])
        normals = oriented_bounding_box(level_to_ground(tilted)).face_normals()
        assert np.linalg.norm(normals - down, axis=1).min() <= 1e-6, seed


# -- 10 ---------------------------------------------------------------------------------------------

def _tree(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timings.json"}


@pytest.mark.slow
def test_criterion_10_end_to_end(criterion, tmp_path):
    criterion(10, "generate on a 3-room plan: < 5 min, GLB + atlas + PLY + manifest, byte-identical, 26 images/room")
    trees, elapsed = [], []
    for name in ("first", "second"):
        cfg = RunConfig(out_dir=str(tmp_path / name))
        t0 = time.perf_counter()
        manifest = run_generate(cfg)
        elapsed.append(time.perf_counter() - t0)
        root = tmp_path / name
        for rel in ("scene.glb", "atlas/atlas.json", "points.ply", "manifest.json"):
            assert (root / rel).is_file(), rel
        counts = manifest.stage("synthesis")["details"]["images_per_room"]
        plan = parse_layout((root / "layout.json").read_text())
        shared = detect_shared_edges(plan)
        expected = {r.id: 2 + perimeter_count(interior_polygon(r, plan.wall_thickness, shared), cfg.camera_config())
                    + cfg.overhead_count for r in plan.rooms}
        assert counts == expected == {"A": 26, "B": 26, "C": 26}
        for rid, n in counts.items():
            assert len(list((root / "images" / rid).rglob("*.png"))) == n
        trees.append(_tree(root))
    print(f"generate wall-clock: {elapsed[0]:.1f} s, {elapsed[1]:.1f} s")
    assert trees[0] == trees[1]
    assert max(elapsed) < 300.0
