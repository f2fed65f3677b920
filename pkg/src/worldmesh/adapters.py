"""External model adapters and their deterministic stand-ins.

Four roles sit outside this package: a layout provider (text -> layout
JSON), an image generator (condition image + style reference + prompt ->
image), a depth estimator (image -> depth of arbitrary scale) and an object
source (image + camera -> object meshes with poses). Each has a
file-directory command contract so any model runner can be plugged in, and a
mock that is a pure function of its inputs.
"""

from __future__ import annotations

import hashlib
import json
import os
import shlex
import subprocess
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from worldmesh.cameras import Camera, matrix_to_quat, rectangle_surrogate
from worldmesh.errors import AdapterFailure
from worldmesh.fixtures import FIXTURES, textured_box
from worldmesh.floorplan import Room
from worldmesh.geom.polygon import Polygon2D
from worldmesh.gltf import Primitive, write_glb
from worldmesh.render import DepthMap, load_depth, load_png, save_depth, save_png

ENV_LAYOUT_CMD = "WORLDMESH_LAYOUT_CMD"
ENV_IMAGE_CMD = "WORLDMESH_IMAGE_CMD"
ENV_DEPTH_CMD = "WORLDMESH_DEPTH_CMD"
ENV_OBJECT_CMD = "WORLDMESH_OBJECT_CMD"
COMMAND_TIMEOUT = 600.0


def image_digest(image: np.ndarray) -> str:
    a = np.ascontiguousarray(image)
    h = hashlib.sha256(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class ImageRequest:
    condition: np.ndarray  # (H, W, 3) uint8
    prompt: str
    seed: int
    style: np.ndarray | None = None  # reference photo, None for the very first image
    depth: DepthMap | None = None  # scaffold depth behind the condition image
    camera_id: str = ""


class ImageGenerator(Protocol):
    def generate(self, request: ImageRequest) -> np.ndarray: ...


class DepthEstimator(Protocol):
    def estimate_depth(self, image: np.ndarray) -> np.ndarray: ...


class ObjectSource(Protocol):
    def reconstruct(self, room: Room, interior: Polygon2D, image: np.ndarray, camera: Camera, out_dir: Path,
                    seed: int) -> None:
        """Write ``objects.json`` and the referenced GLB meshes into ``out_dir``."""


# -- mocks ------------------------------------------------------------------------------------------

class FixtureLayoutProvider:
    """Returns a built-in fixture document for every prompt."""

    def __init__(self, name: str = "three_rooms"):
        if name not in FIXTURES:
            raise ValueError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}")
        self.name = name

    def sample(self, prompt: str) -> str:
        return json.dumps(FIXTURES[self.name](), sort_keys=True)


@dataclass
class DepthStore:
    """Scaffold depth per generated image digest, shared by the mock generator and echo estimator."""

    depths: dict[str, np.ndarray] = field(default_factory=dict)


class MockImageGenerator:
    """Condition image with a smooth, seed-dependent tint and shading ramp.

    The output depends only on the request. When the request carries scaffold
    depth it is filed under the image digest so ``EchoDepthEstimator`` can
    return it.
    """

    def __init__(self, store: DepthStore | None = None):
        self.store = store if store is not None else DepthStore()

    def generate(self, request: ImageRequest) -> np.ndarray:
        cond = np.asarray(request.condition, dtype=np.float64)
        key = zlib.crc32(request.prompt.encode()) ^ (request.seed & 0xFFFFFFFF)
        rng = np.random.default_rng(key)
        tint = rng.uniform(-25.0, 25.0, size=3)
        if request.style is not None:
            tint += 0.1 * (np.asarray(request.style, dtype=np.float64).reshape(-1, 3).mean(axis=0) - 128.0)
        h, w = cond.shape[:2]
        ramp = np.linspace(-8.0, 8.0, h)[:, None, None] * rng.uniform(0.5, 1.0)
        out = np.clip(np.round(0.85 * cond + 20.0 + tint + ramp), 0, 255).astype(np.uint8)
        if request.depth is not None:
            self.store.depths[image_digest(out)] = np.asarray(request.depth.values)
        return out


class EchoDepthEstimator:
    """Returns the scaffold depth recorded for an image by ``MockImageGenerator``."""

    def __init__(self, store: DepthStore):
        self.store = store

    def estimate_depth(self, image: np.ndarray) -> np.ndarray:
        try:
            return self.store.depths[image_digest(image)]
        except KeyError:
            raise AdapterFailure("echo depth: image was not produced by the mock generator") from None


class ConstantDepthEstimator:
    def __init__(self, value: float = 2.0):
        self.value = float(value)

    def estimate_depth(self, image: np.ndarray) -> np.ndarray:
        return np.full(np.asarray(image).shape[:2], self.value)


# furniture in the room's rectangle frame: label, size (m), center (u, v) in [-1, 1], base height, yaw (deg)
MOCK_FURNITURE = (
    ("rug", (2.0, 1.4, 0.02), (0.0, 0.0), 0.03, 0.0),
    ("sofa", (1.8, 0.85, 0.8), (0.0, -0.62), 0.2, 0.0),
    ("coffee table", (0.9, 0.5, 0.4), (0.05, -0.05), 0.15, 3.0),
    ("armchair", (0.8, 0.8, 0.9), (0.62, 0.35), 0.1, -20.0),
    ("floor lamp", (0.35, 0.35, 1.5), (-0.8, 0.75), 0.1, 0.0),
    ("painting", (0.9, 0.04, 0.6), (0.0, 0.9), 1.2, 180.0),
    ("pendant lamp", (0.4, 0.4, 0.35), (0.0, 0.0), None, 0.0),
    ("plant", (0.4, 0.4, 0.9), (0.82, -0.8), 0.05, 0.0),
)


def _rect_frame(interior_rect: np.ndarray):
    """Center, unit axes and half extents of a rectangle given by 4 corners."""
    c = interior_rect.mean(axis=0)
    e0 = interior_rect[1] - interior_rect[0]
    e1 = interior_rect[3] - interior_rect[0]
    return c, e0 / np.linalg.norm(e0), e1 / np.linalg.norm(e1), np.array([np.linalg.norm(e0), np.linalg.norm(e1)]) / 2


class MockObjectSource:
    """A fixed furniture set laid out in the room's rectangle with seed-dependent pose noise.

    Poses are reported in the frame of the given camera, as a single-view
    reconstruction model would; each box takes its color from the image
    pixel its center projects to.
    """

    def __init__(self, furniture=MOCK_FURNITURE):
        self.furniture = furniture

    def reconstruct(self, room: Room, interior: Polygon2D, image: np.ndarray, camera: Camera, out_dir: Path,
                    seed: int) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rect = rectangle_surrogate(interior)
        center, ax_u, ax_v, half = _rect_frame(rect)
        rng = np.random.default_rng([seed, zlib.crc32(room.id.encode())])
        img = np.asarray(image)
        entries = []
        for k, (label, size, (u, v), base, yaw) in enumerate(self.furniture):
            size = np.minimum(np.asarray(size, float), [0.45 * 2 * half[0], 0.45 * 2 * half[1], 0.6 * room.ceiling_height])
            xy = center + u * (half[0] - size[0] / 2) * ax_u + v * (half[1] - size[1] / 2) * ax_v
            z = room.ceiling_height - 0.25 - size[2] / 2 if base is None else base + size[2] / 2
            heading = np.arctan2(ax_u[1], ax_u[0]) + np.radians(yaw) + rng.normal(0, 0.02)
            tilt = rng.normal(0, 0.03, size=2)
            rot = _euler_zyx(heading, tilt[0], tilt[1])
            world_t = np.array([xy[0], xy[1], z]) + rng.normal(0, 0.02, size=3)
            oid = f"{room.id}/obj{k:02d}"
            px, py, d = camera.project(world_t[None])
            color = (150, 130, 110)
            if d[0] > 0 and 0 <= px[0] < img.shape[1] and 0 <= py[0] < img.shape[0]:
                color = tuple(int(c) for c in img[int(py[0]), int(px[0]), :3])
            box = textured_box(size, oid, color)
            uv_gl = np.column_stack([box.uv[:, 0], 1.0 - box.uv[:, 1]])
            name = f"obj{k:02d}.glb"
            write_glb(out_dir / name, [Primitive(box.vertices, box.faces, uv=uv_gl, image=box.textures[oid])])
            cam_r = camera.rotation
            pose_r = cam_r.T @ rot
            pose_t = cam_r.T @ (world_t - camera.position)
            entries.append({"object_id": oid, "label": label, "room": room.id, "source_camera_id": camera.id,
                            "pose": {"quat_wxyz": matrix_to_quat(pose_r).tolist(), "translation": pose_t.tolist()},
                            "mesh": name})
        (out_dir / "objects.json").write_text(json.dumps({"objects": entries}, indent=2))


def _euler_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cz, sz = np.cos(yaw), np.sin(yaw)
    cy, sy = np.cos(pitch), np.sin(pitch)
    cx, sx = np.cos(roll), np.sin(roll)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return rz @ ry @ rx


# -- command adapters ---------------------------------------------------------------------------------

def _run(cmd: list[str], request_dir: Path, what: str) -> None:
    try:
        subprocess.run([*cmd, str(request_dir)], check=True, capture_output=True, timeout=COMMAND_TIMEOUT)
    except (OSError, subprocess.SubprocessError) as exc:
        raise AdapterFailure(f"{what} command failed: {exc}") from exc


def _command(spec: str | None, env: str, what: str) -> list[str]:
    text = spec or os.environ.get(env, "")
    if not text:
        raise AdapterFailure(f"no {what} command configured (set {env})")
    return shlex.split(text)


class CommandLayoutProvider:
    """Runs ``cmd REQUEST_DIR`` with ``prompt.txt``; reads ``layout.json``."""

    def __init__(self, cmd: str | None = None):
        self.cmd = _command(cmd, ENV_LAYOUT_CMD, "layout")

    def sample(self, prompt: str) -> str:
        with tempfile.TemporaryDirectory() as tmp:
            req = Path(tmp)
            (req / "prompt.txt").write_text(prompt)
            _run(self.cmd, req, "layout")
            try:
                return (req / "layout.json").read_text()
            except OSError as exc:
                raise AdapterFailure(f"layout command wrote no layout.json: {exc}") from exc


class CommandImageGenerator:
    """Request dir: condition.png, style.png (optional), prompt.txt, seed.txt, depth.tiff; response image.png."""

    def __init__(self, cmd: str | None = None):
        self.cmd = _command(cmd, ENV_IMAGE_CMD, "image")

    def generate(self, request: ImageRequest) -> np.ndarray:
        with tempfile.TemporaryDirectory() as tmp:
            req = Path(tmp)
            save_png(request.condition, req / "condition.png")
            if request.style is not None:
                save_png(request.style, req / "style.png")
            if request.depth is not None:
                save_depth(request.depth, req / "depth.tiff")
            (req / "prompt.txt").write_text(request.prompt)
            (req / "seed.txt").write_text(str(request.seed))
            _run(self.cmd, req, "image")
            try:
                img = load_png(req / "image.png")
            except OSError as exc:
                raise AdapterFailure(f"image command wrote no image.png: {exc}") from exc
        if img.shape[:2] != request.condition.shape[:2]:
            raise AdapterFailure(f"image command returned {img.shape[:2]}, expected {request.condition.shape[:2]}")
        return img


class CommandDepthEstimator:
    """Request dir: image.png; response depth.tiff (32-bit float, any scale)."""

    def __init__(self, cmd: str | None = None):
        self.cmd = _command(cmd, ENV_DEPTH_CMD, "depth")

    def estimate_depth(self, image: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory() as tmp:
            req = Path(tmp)
            save_png(image, req / "image.png")
            _run(self.cmd, req, "depth")
            try:
                return np.asarray(load_depth(req / "depth.tiff").values)
            except (OSError, ValueError) as exc:
                raise AdapterFailure(f"depth command output unreadable: {exc}") from exc


class CommandObjectSource:
    """Request dir: image.png, camera.json, room.json; the command fills ``out/`` with objects.json + GLBs."""

    def __init__(self, cmd: str | None = None):
        self.cmd = _command(cmd, ENV_OBJECT_CMD, "object")

    def reconstruct(self, room: Room, interior: Polygon2D, image: np.ndarray, camera: Camera, out_dir: Path,
                    seed: int) -> None:
        import shutil

        with tempfile.TemporaryDirectory() as tmp:
            req = Path(tmp)
            save_png(image, req / "image.png")
            (req / "camera.json").write_text(json.dumps(camera.to_dict()))
            (req / "room.json").write_text(json.dumps({"id": room.id, "kind": room.kind, "seed": seed,
                                                        "interior": interior.vertices.tolist(),
                                                        "ceiling_height": room.ceiling_height}))
            (req / "out").mkdir()
            _run(self.cmd, req, "object")
            if not (req / "out" / "objects.json").exists():
                raise AdapterFailure("object command wrote no out/objects.json")
            shutil.copytree(req / "out", out_dir, dirs_exist_ok=True)


# -- registry -----------------------------------------------------------------------------------------

@dataclass
class Adapters:
    layout: object
    image: ImageGenerator
    depth: DepthEstimator
    objects: ObjectSource


def make_adapters(layout: str = "fixture:three_rooms", image: str = "mock", depth: str = "echo",
                  objects: str = "mock") -> Adapters:
    """Adapters by name: ``fixture:<name>`` / ``command`` for layouts, ``mock`` / ``command`` for
    images and objects, ``echo`` / ``constant`` / ``command`` for depth. Commands come from the
    WORLDMESH_*_CMD environment variables."""
    store = DepthStore()
    if layout.startswith("fixture:"):
        lp = FixtureLayoutProvider(layout.split(":", 1)[1])
    elif layout == "command":
        lp = CommandLayoutProvider()
    else:
        raise ValueError(f"unknown layout provider {layout!r}")
    gens = {"mock": lambda: MockImageGenerator(store), "command": CommandImageGenerator}
    deps = {"echo": lambda: EchoDepthEstimator(store), "constant": ConstantDepthEstimator,
            "command": CommandDepthEstimator}
    objs = {"mock": MockObjectSource, "command": CommandObjectSource}
    for name, table, what in ((image, gens, "image generator"), (depth, deps, "depth estimator"),
                              (objects, objs, "object source")):
        if name not in table:
            raise ValueError(f"unknown {what} {name!r}; choose from {sorted(table)}")
    return Adapters(lp, gens[image](), deps[depth](), objs[objects]())
