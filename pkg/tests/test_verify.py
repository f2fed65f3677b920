import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import plan_and_mesh, window_recall
from worldmesh.cameras import make_camera
from worldmesh.errors import AdapterFailure, DimensionMismatch
from worldmesh.fixtures import two_rooms
from worldmesh.geom import TriMesh, box_mesh
from worldmesh.render import render_depth
from worldmesh.verify import EdgeMap, depth_edges, dilate, edge_recall, normalize_depth, verify_image


class FixedDepth:
    def __init__(self, depth):
        self.depth = depth

    def estimate_depth(self, image):
        return self.depth


class Broken:
    def estimate_depth(self, image):
        raise RuntimeError("model crashed")


def random_edges(rng, shape=(128, 128), density=0.01):
    return EdgeMap(rng.random(shape) < density)


def step(width=128, height=96, col=64, near=1.0, far=3.0):
    return np.where(np.arange(width)[None, :] < col, near, far) * np.ones((height, 1))


@pytest.fixture(scope="module")
def scene():
    plan, mesh = plan_and_mesh(two_rooms())
    cam = make_camera([1.5, 1.0, 1.6], [1.0, 0.6, 0.0], role="perimeter", width=172, height=96)
    return mesh, cam, render_depth(mesh, cam)


# -- edges ------------------------------------------------------------------------------------

def test_constant_depth_has_no_edges():
    assert depth_edges(np.full((64, 64), 2.5)).count == 0


def test_step_gives_thin_edge_at_boundary():
    e = depth_edges(step()).mask
    cols = np.nonzero(e)[1]
    assert e.any() and set(cols) <= {62, 63, 64, 65}
    assert e.sum(axis=1).max() <= 2  # at most two columns straddle a symmetric step
    assert e[10:-10].sum(axis=1).min() >= 1


@pytest.mark.parametrize("slope,expected", [(0.04, 0), (0.14, 0), (0.2, None)])
def test_ramp_against_thresholds(slope, expected):
    # normalized slope per pixel is slope; plateau keeps the normalization range at [0, 1]
    x = np.clip(np.arange(128) * slope, 0, 1.0)
    x[-1] = 1.0
    ramp = np.tile(1.0 + x, (64, 1))
    n = depth_edges(ramp).count
    if expected is None:
        assert n > 0  # gradient 0.2 exceeds the high threshold 0.15
    else:
        assert n == expected


def test_full_range_ramp_is_below_threshold():
    # 1 / 127 per pixel < 0.05
    assert depth_edges(np.tile(np.linspace(1.0, 4.0, 128), (96, 1))).count == 0


def test_no_hit_is_far():
    d = np.full((32, 32), 2.0)
    d[:, 16:] = np.inf
    n = normalize_depth(d)
    assert (n[:, 16:] == 1.0).all() and (n[:, :16] == 0.0).all()
    assert depth_edges(d).count > 0


def test_depth_edges_translation_equivariant():
    rng = np.random.default_rng(3)
    d = np.ones((96, 96))
    for _ in range(4):
        y, x = rng.integers(20, 60, size=2)
        d[y:y + 15, x:x + 18] = rng.uniform(1.5, 3.0)
    k = 5
    shifted = np.ones_like(d)
    shifted[k:, k:] = d[:-k, :-k]
    a, b = depth_edges(d).mask, depth_edges(shifted).mask
    assert np.array_equal(a[10:-15, 10:-15], b[10 + k:-15 + k, 10 + k:-15 + k])


# -- dilation and recall ---------------------------------------------------------------------------

def test_single_pixel_dilation():
    m = np.zeros((64, 64), bool)
    m[30, 30] = True
    d = dilate(EdgeMap(m), 10).mask
    assert d.sum() == 21 * 21 and d[20:41, 20:41].all()
    m[:] = False
    m[2, 60] = True
    assert dilate(EdgeMap(m), 10).mask.sum() == 13 * 14  # clipped at the borders
    assert dilate(EdgeMap(m), 0).mask.sum() == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 12))
def test_dilation_monotone(seed, delta):
    rng = np.random.default_rng(seed)
    a, b = random_edges(rng, (48, 48)), random_edges(rng, (48, 48))
    assert not (dilate(a, delta).mask & ~dilate(a | b, delta).mask).any()


def test_recall_examples():
    rng = np.random.default_rng(0)
    e = random_edges(rng)
    assert edge_recall(e, e) == 1.0
    assert edge_recall(e, EdgeMap(np.zeros_like(e.mask))) == 0.0
    empty = EdgeMap(np.zeros((8, 8), bool))
    assert edge_recall(empty, empty) == 1.0
    with pytest.raises(DimensionMismatch):
        edge_recall(e, empty)


def line(col, shape=(128, 128), rows=(14, 114)):
    m = np.zeros(shape, bool)
    m[rows[0]:rows[1], col] = True
    return EdgeMap(m)


def test_line_offsets_at_delta_ten():
    assert line(50).count == 100
    assert edge_recall(line(50), line(58), 10) == 1.0  # L-inf distance 8
    assert edge_recall(line(50), line(61), 10) == 0.0  # distance 11
    assert window_recall(line(50).mask, line(58).mask, 10) == 1.0
    assert window_recall(line(50).mask, line(61).mask, 10) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_recall_matches_window_oracle(seed):
    rng = np.random.default_rng(seed)
    mesh = random_edges(rng, density=rng.uniform(0.002, 0.03))
    est = random_edges(rng, density=rng.uniform(0.0005, 0.01))
    delta = int(rng.integers(0, 15))
    assert edge_recall(mesh, est, delta) == window_recall(mesh.mask, est.mask, delta)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_recall_monotone(seed):
    rng = np.random.default_rng(seed)
    mesh, est, extra = random_edges(rng, (64, 64)), random_edges(rng, (64, 64), 0.002), random_edges(rng, (64, 64), 0.002)
    values = [edge_recall(mesh, est, d) for d in range(0, 16)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert edge_recall(mesh, est | extra, 5) >= edge_recall(mesh, est, 5)


# -- whole-image verification -------------------------------------------------------------------------

def test_echo_adapter_passes(scene):
    mesh, cam, depth = scene
    img = np.zeros((cam.height, cam.width, 3), np.uint8)
    res = verify_image(img, depth, FixedDepth(depth))
    assert res.mesh_edge_pixels > 0
    assert res.recall == 1.0 and res.passed and res.matched_pixels == res.mesh_edge_pixels


def test_constant_adapter_fails(scene):
    mesh, cam, depth = scene
    img = np.zeros((cam.height, cam.width, 3), np.uint8)
    res = verify_image(img, depth, FixedDepth(np.full((cam.height, cam.width), 2.0)))
    assert res.recall == 0.0 and not res.passed
    assert res.to_dict()["pass"] is False


def test_extra_furniture_edges_are_ignored(scene):
    mesh, cam, depth = scene
    furnished = TriMesh.merge([mesh, box_mesh([2.6, 1.8, 0.0], [3.1, 2.3, 2.0], category="object", object_id="x")])
    est_depth = render_depth(furnished, cam)
    mesh_edges, est_edges = depth_edges(depth), depth_edges(est_depth)
    assert (est_edges.mask & ~mesh_edges.mask).sum() > 20  # the box adds edges
    union = mesh_edges | est_edges
    assert edge_recall(mesh_edges, union) == 1.0
    res = verify_image(np.zeros((cam.height, cam.width, 3), np.uint8), depth, FixedDepth(est_depth))
    assert res.recall == window_recall(mesh_edges.mask, est_edges.mask, 10)
    assert res.passed


def test_scale_free():
    d = step()
    res = verify_image(np.zeros((96, 128, 3), np.uint8), d, FixedDepth(d * 37.0 + 5.0))
    assert res.recall == 1.0


def test_threshold_is_strict():
    d = step()
    res = verify_image(np.zeros((96, 128, 3), np.uint8), d, FixedDepth(d), threshold=1.0)
    assert res.recall == 1.0 and not res.passed


def test_adapter_failures():
    img = np.zeros((96, 128, 3), np.uint8)
    with pytest.raises(AdapterFailure):
        verify_image(img, step(), Broken())
    with pytest.raises(AdapterFailure):
        verify_image(img, step(), FixedDepth(np.ones((10, 10))))
