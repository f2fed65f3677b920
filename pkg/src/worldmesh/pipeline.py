"""Stage orchestration: layout to exported scene, with a resumable artifact tree.

Every stage reads its inputs from the run directory and writes its outputs
there, so a single stage can be re-run against prior artifacts. The run
manifest records the resolved config and, per stage, the sha256 of every
artifact it wrote plus stage details (verification results, schedule). It is
rewritten after each stage. Wall-clock timings go to a separate
``timings.json`` so the manifest itself stays reproducible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from worldmesh.adapters import Adapters, ImageRequest, make_adapters
from worldmesh.cameras import (PLACEMENT_FOV_DEG, Camera, CameraConfig, cameras_from_jsonl, cameras_to_jsonl,
                               nudge_away_from_objects, quat_similarity, room_cameras, schedule_synthesis,
                               schedule_to_dict)
from worldmesh.errors import (AdapterFailure, MissingPriorArtifact, NoFreeSpace, StageFailure,
                              VerificationExhausted, WorldMeshError)
from worldmesh.floorplan import FloorPlan, detect_shared_edges, layout_to_dict, parse_layout, sample_until_valid
from worldmesh.geom.mesh import TriMesh
from worldmesh.gltf import export_glb, glb_to_mesh
from worldmesh.objects import build_m_geo, load_object_manifest
from worldmesh.recon import backproject, loss_eval, merge_clouds, write_ply
from worldmesh.render import DepthMap, render_depth, render_view, save_png
from worldmesh.structmesh import assemble_struct_mesh, interior_polygon
from worldmesh.texproj import TextureAtlas, build_atlas, project_image
from worldmesh.verify import VerificationResult, depth_edges, estimate_depth, _counts

STAGES = ("layout", "structmesh", "cameras", "objects", "texture", "synthesis", "export")
MANIFEST_VERSION = "worldmesh-run/1"


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "run"
    theme: str = "a bright, modern family home"
    seed: int = 0
    # adapters
    layout_provider: str = "fixture:three_rooms"
    image_generator: str = "mock"
    depth_estimator: str = "echo"
    object_source: str = "mock"
    max_layout_attempts: int = 8
    # cameras
    width: int = 1376
    height: int = 768
    fov_deg: float = 60.0
    placement_fov_deg: float = PLACEMENT_FOV_DEG
    eye_height: float = 1.6
    wall_offset: float = 0.3
    perimeter_count: int = 16
    min_spacing: float = 0.5
    overhead_count: int = 8
    overhead_height_fraction: float = 0.85
    overhead_pitch_deg: float = 25.0
    camera_clearance: float = 0.3
    # texturing and rendering
    texels_per_meter: float = 64.0
    tau: float = 0.10
    depth_near: float = 0.2
    depth_far: float = 12.0
    # verification
    delta: int = 10
    recall_threshold: float = 0.6
    canny_low: float = 0.05
    canny_high: float = 0.15
    max_retries: int = 4
    # reconstruction
    lambda_ssim: float = 0.2
    lambda_depth: float = 0.7
    backproject_stride: int = 4
    voxel_size: float = 0.02

    def validate(self) -> "RunConfig":
        checks = [
            (self.max_layout_attempts >= 1, "max_layout_attempts must be >= 1"),
            (self.width >= 16 and self.height >= 16, "images must be at least 16x16"),
            (0 < self.fov_deg < 180 and 0 < self.placement_fov_deg < 180, "fov must lie in (0, 180)"),
            (self.camera_clearance >= 0, "camera_clearance must be non-negative"),
            (self.texels_per_meter > 0, "texels_per_meter must be positive"),
            (self.tau > 0, "tau must be positive"),
            (0 < self.depth_near < self.depth_far, "need 0 < depth_near < depth_far"),
            (self.delta >= 0, "delta must be non-negative"),
            (0 <= self.recall_threshold < 1, "recall_threshold must lie in [0, 1)"),
            (0 <= self.canny_low <= self.canny_high, "need 0 <= canny_low <= canny_high"),
            (self.max_retries >= 1, "max_retries must be >= 1"),
            (0 <= self.lambda_ssim <= 1 and self.lambda_depth >= 0, "lambda_ssim in [0, 1], lambda_depth >= 0"),
            (self.backproject_stride >= 1, "backproject_stride must be >= 1"),
            (self.voxel_size > 0, "voxel_size must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        self.camera_config()  # range checks of the camera block
        return self

    def camera_config(self) -> CameraConfig:
        return CameraConfig(self.eye_height, self.wall_offset, self.perimeter_count, self.min_spacing,
                            self.overhead_count, self.overhead_height_fraction, self.overhead_pitch_deg,
                            self.width, self.height, self.fov_deg)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def manifest_dict(self) -> dict:
        """Everything but the output location, so identical runs in different directories match."""
        d = self.to_dict()
        del d["out_dir"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
        return cls(**d)


@dataclass
class RunManifest:
    config: dict
    stages: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"version": MANIFEST_VERSION, "config": self.config, "stages": self.stages}

    def stage(self, name: str) -> dict | None:
        """Latest entry for a stage."""
        for entry in reversed(self.stages):
            if entry["stage"] == name:
                return entry
        return None

    @property
    def artifacts(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for entry in self.stages:
            out.update(entry["artifacts"])
        return out


# -- helpers -----------------------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def derive_seed(base: int, *parts) -> int:
    """Stable 31-bit seed from the run seed and a key (camera id, attempt, ...)."""
    h = hashlib.sha256(json.dumps([int(base), *[str(p) for p in parts]]).encode())
    return int.from_bytes(h.digest()[:4], "little") & 0x7FFFFFFF


def load_prompt(name: str) -> str:
    return resources.files("worldmesh").joinpath("resources", name).read_text()


def synthesis_prompt(theme: str) -> str:
    return load_prompt("iterative_prompt.txt").format(theme=theme)


def object_prompt(room, theme: str) -> str:
    counts: dict[str, int] = {}
    for op in room.openings:
        counts[op.kind] = counts.get(op.kind, 0) + 1
    if counts:
        parts = [f"{n} {k}{'s' if n > 1 else ''}" for k, n in sorted(counts.items())]
        openings = "The room has " + ", ".join(parts) + "."
    else:
        openings = ""
    return load_prompt("object_prompt.txt").format(room_kind=room.kind, theme=theme, openings=openings).strip()


def image_path(root: Path, cam_id: str) -> Path:
    return root / "images" / f"{cam_id}.png"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(root: Path, *names: str) -> None:
    for n in names:
        if not (root / n).exists():
            raise MissingPriorArtifact(f"{n} not found in {root}; run the earlier stages first")


@dataclass
class RunContext:
    config: RunConfig
    root: Path
    adapters: Adapters
    manifest: RunManifest
    timings: dict = field(default_factory=dict)

    def path(self, name: str) -> Path:
        return self.root / name

    def plan(self) -> FloorPlan:
        _require(self.root, "layout.json")
        return parse_layout(self.path("layout.json").read_text())

    def cameras(self, name: str = "cameras.jsonl") -> list[Camera]:
        _require(self.root, name)
        return cameras_from_jsonl(self.path(name).read_text())

    def mesh(self, name: str) -> TriMesh:
        _require(self.root, name)
        return glb_to_mesh(self.path(name))

    def m_geo(self, plan: FloorPlan):
        """Structural mesh plus placed objects, rebuilt from the object manifests on disk."""
        _require(self.root, "m_struct.glb", "cameras_planned.jsonl", "objects")
        planned = {c.id: c for c in self.cameras("cameras_planned.jsonl")}
        placement = {c.id: c.with_image(self.config.width, self.config.height, self.config.placement_fov_deg)
                     for c in planned.values()}
        objects: dict = {}
        for room in plan.rooms:
            d = self.path("objects") / room.id
            if (d / "objects.json").exists():
                for rid, objs in load_object_manifest(d, placement).items():
                    objects.setdefault(rid, []).extend(objs)
        m_geo, reports = build_m_geo(plan, structural_mesh(plan), objects)
        return m_geo, reports


def structural_mesh(plan: FloorPlan) -> TriMesh:
    return assemble_struct_mesh(plan)


def _record(ctx: RunContext, stage: str, files, details: dict | None = None) -> dict:
    arts = {}
    for f in sorted(set(files)):
        p = ctx.path(f)
        if p.is_dir():
            for q in sorted(p.rglob("*")):
                if q.is_file():
                    arts[q.relative_to(ctx.root).as_posix()] = sha256_file(q)
        else:
            arts[f] = sha256_file(p)
    entry = {"stage": stage, "artifacts": arts}
    if details:
        entry["details"] = details
    ctx.manifest.stages.append(entry)
    save_manifest(ctx)
    return entry


def save_manifest(ctx: RunContext) -> None:
    _write_json(ctx.path("manifest.json"), ctx.manifest.to_dict())
    _write_json(ctx.path("timings.json"), ctx.timings)


# -- verification with regeneration ---------------------------------------------------------------------

def generate_verified(ctx: RunContext, request: ImageRequest, scaffold: DepthMap, key: str):
    """Generate until the image passes verification or attempts run out.

    Returns (image, estimated depth, seed, attempt records). Every attempt
    uses a seed derived from the run seed, ``key`` and the attempt number.
    """
    cfg = ctx.config
    mesh_edges = depth_edges(scaffold, cfg.canny_low, cfg.canny_high)
    attempts: list[dict] = []
    results: list[VerificationResult] = []
    for k in range(cfg.max_retries):
        seed = derive_seed(cfg.seed, key, k)
        req = dataclasses.replace(request, seed=seed)
        try:
            image = np.asarray(ctx.adapters.image.generate(req))
        except AdapterFailure:
            raise
        except Exception as exc:  # adapters wrap arbitrary tools
            raise AdapterFailure(f"image generation failed: {exc}") from exc
        if image.shape[:2] != scaffold.values.shape or image.ndim != 3:
            raise AdapterFailure(f"image adapter returned {image.shape}, expected {scaffold.values.shape} x 3")
        image = np.ascontiguousarray(image[..., :3]).astype(np.uint8)
        est = estimate_depth(ctx.adapters.depth, image)
        total, matched = _counts(mesh_edges, depth_edges(est, cfg.canny_low, cfg.canny_high), cfg.delta)
        res = VerificationResult(1.0 if total == 0 else matched / total, cfg.recall_threshold, cfg.delta,
                                 total, matched)
        results.append(res)
        attempts.append({"attempt": k, "seed": seed, **res.to_dict()})
        if res.passed:
            return image, est, seed, attempts
    raise VerificationExhausted(key, attempts)


# -- stages -------------------------------------------------------------------------------------------

def stage_layout(ctx: RunContext) -> dict:
    result = sample_until_valid(ctx.adapters.layout, ctx.config.theme, ctx.config.max_layout_attempts)
    _write_json(ctx.path("layout.json"), layout_to_dict(result.plan))
    _write_json(ctx.path("layout_report.json"),
                {"attempts": result.attempts, "reports": [r.to_dict() for r in result.reports]})
    return _record(ctx, "layout", ["layout.json", "layout_report.json"], {"attempts": result.attempts})


def stage_structmesh(ctx: RunContext) -> dict:
    plan = ctx.plan()
    export_glb(structural_mesh(plan), ctx.path("m_struct.glb"), manifest_path=ctx.path("m_struct_tags.json"))
    return _record(ctx, "structmesh", ["m_struct.glb", "m_struct_tags.json"])


def stage_cameras(ctx: RunContext) -> dict:
    plan = ctx.plan()
    cfg = ctx.config.camera_config()
    shared = detect_shared_edges(plan)
    cams = []
    counts = {}
    for room in plan.rooms:
        rc = room_cameras(room, interior_polygon(room, plan.wall_thickness, shared), cfg)
        counts[room.id] = len(rc)
        cams.extend(rc)
    ctx.path("cameras_planned.jsonl").write_text(cameras_to_jsonl(cams))
    return _record(ctx, "cameras", ["cameras_planned.jsonl"], {"per_room": counts})


def stage_objects(ctx: RunContext) -> dict:
    """Per room: empty-room depth at the first bootstrap camera (wide FOV), a verified furnished
    image, object reconstruction, then placement of every room's objects and camera nudging."""
    cfg = ctx.config
    plan = ctx.plan()
    _require(ctx.root, "m_struct.glb")
    struct = structural_mesh(plan)
    shared = detect_shared_edges(plan)
    cams = ctx.cameras("cameras_planned.jsonl")
    details = {"rooms": {}}
    files = []
    for room in plan.rooms:
        c0 = next(c for c in cams if c.room_id == room.id)
        wide = c0.with_image(cfg.width, cfg.height, cfg.placement_fov_deg)
        depth, cond = render_view(struct, wide, None, cfg.depth_near, cfg.depth_far)
        req = ImageRequest(cond.rgb, object_prompt(room, cfg.theme), 0, None, depth, wide.id)
        image, _, seed, attempts = generate_verified(ctx, req, depth, f"objects/{room.id}")
        out = ctx.path("objects") / room.id
        out.mkdir(parents=True, exist_ok=True)
        save_png(image, out / "image.png")
        try:
            ctx.adapters.objects.reconstruct(room, interior_polygon(room, plan.wall_thickness, shared), image,
                                             wide, out, seed)
        except WorldMeshError:
            raise
        except Exception as exc:
            raise AdapterFailure(f"object reconstruction failed: {exc}") from exc
        details["rooms"][room.id] = {"camera": wide.id, "verification": attempts}
        files.append(f"objects/{room.id}")

    m_geo, reports = ctx.m_geo(plan)
    _write_json(ctx.path("placement.json"), [r.to_dict() for r in reports])
    export_glb(m_geo, ctx.path("m_geo.glb"), manifest_path=ctx.path("m_geo_tags.json"))

    nudged, moved = [], []
    for c in cams:
        try:
            n = nudge_away_from_objects(c, m_geo, cfg.camera_clearance)
        except NoFreeSpace as exc:
            n = c
            moved.append({"camera": c.id, "kept": str(exc)})
        if n is not c:
            moved.append({"camera": c.id, "from": c.position.tolist(), "to": n.position.tolist()})
        nudged.append(n)
    ctx.path("cameras.jsonl").write_text(cameras_to_jsonl(nudged))
    details["nudged"] = moved
    return _record(ctx, "objects", files + ["placement.json", "m_geo.glb", "m_geo_tags.json", "cameras.jsonl"],
                   details)


def stage_texture(ctx: RunContext) -> dict:
    """Initial atlas from each room's verified furnished image, projected from the wide first camera."""
    cfg = ctx.config
    plan = ctx.plan()
    m_geo, _ = ctx.m_geo(plan)
    cams = ctx.cameras("cameras_planned.jsonl")
    atlas = build_atlas(plan, cfg.texels_per_meter)
    from worldmesh.render import load_png

    for room in plan.rooms:
        src = ctx.path("objects") / room.id / "image.png"
        _require(ctx.root, src.relative_to(ctx.root).as_posix())
        c0 = next(c for c in cams if c.room_id == room.id)
        wide = c0.with_image(cfg.width, cfg.height, cfg.placement_fov_deg)
        depth = render_depth(m_geo, wide)
        atlas = project_image(m_geo, wide, load_png(src), depth, room.id, atlas, cfg.tau)
    atlas.save(ctx.path("atlas_initial"))
    return _record(ctx, "texture", ["atlas_initial"], {"coverage": atlas.coverage()})


def _global_style_ref(cam: Camera, done: list[tuple[Camera, Path]]):
    """Earliest previously generated image whose camera is rotationally closest to ``cam``."""
    best, best_s = None, -1.0
    for c, p in done:
        s = quat_similarity(cam.quat, c.quat)
        if s > best_s:
            best, best_s = (c, p), s
    return best, best_s


def stage_synthesis(ctx: RunContext) -> dict:
    """Scheduled generation per room: condition render, style reference, verified image, atlas update."""
    from worldmesh.render import load_png

    cfg = ctx.config
    plan = ctx.plan()
    m_geo, _ = ctx.m_geo(plan)
    cams = ctx.cameras("cameras.jsonl")
    _require(ctx.root, "atlas_initial/atlas.json")
    atlas = TextureAtlas.load(ctx.path("atlas_initial"))
    prompt = synthesis_prompt(cfg.theme)
    done: list[tuple[Camera, Path]] = []
    records, schedules, losses = [], {}, []
    clouds = []
    t_room = {}
    for room in plan.rooms:
        t0 = time.perf_counter()
        rc = [c for c in cams if c.room_id == room.id]
        sched = schedule_synthesis(rc, [0, 1])
        schedules[room.id] = schedule_to_dict(sched, rc)
        room_clouds = []
        for pos, (ci, ref) in enumerate(zip(sched.order, sched.style_ref)):
            cam = rc[ci]
            if ref is not None:
                ref_cam = rc[sched.order[ref]]
                style_id, sim = ref_cam.id, sched.similarity[pos]
                style_img = load_png(image_path(ctx.root, ref_cam.id))
            elif done:
                (ref_cam, ref_path), sim = _global_style_ref(cam, done)
                style_id, style_img = ref_cam.id, load_png(ref_path)
            else:
                style_id, sim, style_img = None, None, None
            depth, cond = render_view(m_geo, cam, atlas, cfg.depth_near, cfg.depth_far)
            req = ImageRequest(cond.rgb, prompt, 0, style_img, depth, cam.id)
            image, est, seed, attempts = generate_verified(ctx, req, depth, cam.id)
            out = image_path(ctx.root, cam.id)
            out.parent.mkdir(parents=True, exist_ok=True)
            save_png(image, out)
            atlas = project_image(m_geo, cam, image, depth, room.id, atlas, cfg.tau)
            loss = loss_eval(cond.rgb, image, depth, est, cfg.lambda_ssim, cfg.lambda_depth)
            losses.append({"camera": cam.id, **loss.to_dict()})
            room_clouds.append(backproject(depth, cam, image, cfg.backproject_stride, exclude_bands=True))
            records.append({"room": room.id, "position": pos, "camera": cam.id, "style_ref": style_id,
                            "style_similarity": sim, "seed": seed, "attempts": len(attempts),
                            "verification": attempts})
            done.append((cam, out))
        clouds.append(merge_clouds(room_clouds, cfg.voxel_size))
        t_room[room.id] = time.perf_counter() - t0
    ctx.timings["synthesis_rooms"] = t_room
    atlas.save(ctx.path("atlas"))
    write_ply(merge_clouds(clouds, cfg.voxel_size), ctx.path("points.ply"))
    totals = [entry["total"] for entry in losses]
    _write_json(ctx.path("losses.json"), {"per_image": losses, "mean_total": float(np.mean(totals))})
    _write_json(ctx.path("schedule.json"), schedules)
    _write_json(ctx.path("synthesis.json"), records)
    per_room = {r.id: sum(1 for x in records if x["room"] == r.id) for r in plan.rooms}
    return _record(ctx, "synthesis", ["images", "atlas", "points.ply", "losses.json", "schedule.json",
                                      "synthesis.json"], {"images_per_room": per_room, "images": records})


def stage_export(ctx: RunContext) -> dict:
    plan = ctx.plan()
    m_geo, _ = ctx.m_geo(plan)
    _require(ctx.root, "atlas/atlas.json")
    atlas = TextureAtlas.load(ctx.path("atlas"))
    export_glb(m_geo, ctx.path("scene.glb"), atlas, manifest_path=ctx.path("scene_tags.json"))
    return _record(ctx, "export", ["scene.glb", "scene_tags.json"])


STAGE_FUNCS = {"layout": stage_layout, "structmesh": stage_structmesh, "cameras": stage_cameras,
               "objects": stage_objects, "texture": stage_texture, "synthesis": stage_synthesis,
               "export": stage_export}


# -- entry points ---------------------------------------------------------------------------------------

def _context(config: RunConfig, adapters: Adapters | None, fresh: bool) -> RunContext:
    config.validate()
    root = Path(config.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config.manifest_dict())
    timings: dict = {}
    if not fresh and (root / "manifest.json").exists():
        doc = json.loads((root / "manifest.json").read_text())
        manifest.stages = doc.get("stages", [])
        if (root / "timings.json").exists():
            timings = json.loads((root / "timings.json").read_text())
    if adapters is None:
        adapters = make_adapters(config.layout_provider, config.image_generator, config.depth_estimator,
                                 config.object_source)
    return RunContext(config, root, adapters, manifest, timings)


def _run(ctx: RunContext, stage: str) -> dict:
    t0 = time.perf_counter()
    try:
        entry = STAGE_FUNCS[stage](ctx)
    except (MissingPriorArtifact, StageFailure):
        save_manifest(ctx)
        raise
    except Exception as exc:
        ctx.manifest.stages.append({"stage": stage, "artifacts": {}, "error": {
            "type": type(exc).__name__, "message": str(exc),
            "results": getattr(exc, "results", None)}})
        save_manifest(ctx)
        raise StageFailure(stage, exc) from exc
    ctx.timings[stage] = time.perf_counter() - t0
    save_manifest(ctx)
    return entry


def run_stage(config: RunConfig, stage: str, adapters: Adapters | None = None) -> dict:
    """Run one stage against the artifacts already in ``config.out_dir``; returns its manifest entry."""
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}; choose from {list(STAGES)}")
    return _run(_context(config, adapters, fresh=False), stage)


def run_generate(config: RunConfig, adapters: Adapters | None = None) -> RunManifest:
    """All stages in order into a fresh manifest."""
    ctx = _context(config, adapters, fresh=True)
    for stage in STAGES:
        _run(ctx, stage)
    return ctx.manifest
