"""Command-line entry point.

Exit codes: 0 success, 1 other errors, 2 invalid layout or configuration,
3 adapter failure, 4 verification failure (exhausted retries).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from worldmesh.errors import (AdapterFailure, ExhaustedAttempts, InvariantError, SchemaError, StageFailure,
                              VerificationExhausted, WorldMeshError)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VALIDATION = 2
EXIT_ADAPTER = 3
EXIT_VERIFICATION = 4


def _read_plan(path):
    from worldmesh.floorplan import parse_layout

    return parse_layout(Path(path).read_text())


def _cameras(path, camera_id=None):
    from worldmesh.cameras import cameras_from_jsonl

    cams = cameras_from_jsonl(Path(path).read_text())
    if camera_id is None:
        return cams
    sel = [c for c in cams if c.id == camera_id]
    if not sel:
        raise SystemExit(f"camera {camera_id!r} not in {path}")
    return sel


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- subcommands ----------------------------------------------------------------------------------------

def cmd_validate_layout(args) -> int:
    from worldmesh.floorplan import validate_layout

    try:
        plan = _read_plan(args.layout)
    except (SchemaError, InvariantError) as exc:
        _print({"valid": False, "violations": [{"rule_id": "schema", "message": str(exc)}]})
        return EXIT_VALIDATION
    report = validate_layout(plan)
    _print(report.to_dict())
    return EXIT_OK if report.valid else EXIT_VALIDATION


def cmd_build_mesh(args) -> int:
    from worldmesh.gltf import export_glb
    from worldmesh.structmesh import assemble_struct_mesh

    mesh = assemble_struct_mesh(_read_plan(args.layout))
    export_glb(mesh, args.out, manifest_path=args.tags)
    _print({"faces": mesh.n_faces, "volume": mesh.volume(), "out": str(args.out)})
    return EXIT_OK


def _camera_config(args):
    from worldmesh.cameras import CameraConfig

    return CameraConfig(eye_height=args.eye_height, wall_offset=args.wall_offset,
                        perimeter_count=args.perimeter_count, overhead_count=args.overhead_count,
                        width=args.width, height=args.height, fov_deg=args.fov_deg)


def cmd_plan_cameras(args) -> int:
    from worldmesh.cameras import cameras_to_jsonl, room_cameras
    from worldmesh.floorplan import detect_shared_edges
    from worldmesh.structmesh import interior_polygon

    plan = _read_plan(args.layout)
    shared = detect_shared_edges(plan)
    cfg = _camera_config(args)
    cams = [c for r in plan.rooms for c in room_cameras(r, interior_polygon(r, plan.wall_thickness, shared), cfg)]
    Path(args.out).write_text(cameras_to_jsonl(cams))
    _print({r.id: sum(c.room_id == r.id for c in cams) for r in plan.rooms})
    return EXIT_OK


def cmd_render(args) -> int:
    from worldmesh.gltf import glb_to_mesh
    from worldmesh.render import render_view, save_depth, save_png
    from worldmesh.texproj import TextureAtlas

    mesh = glb_to_mesh(args.mesh)
    atlas = TextureAtlas.load(args.atlas) if args.atlas else None
    out = Path(args.out)
    for cam in _cameras(args.cameras, args.camera):
        stem = cam.id.replace("/", "__")
        depth, cond = render_view(mesh, cam, atlas, args.near, args.far)
        out.mkdir(parents=True, exist_ok=True)
        save_depth(depth, out / f"{stem}_depth.tiff", out / f"{stem}_depth.png")
        save_png(cond.rgb, out / f"{stem}_condition.png")
    return EXIT_OK


def cmd_place_objects(args) -> int:
    from worldmesh.gltf import export_glb
    from worldmesh.objects import build_m_geo, load_object_manifest
    from worldmesh.structmesh import assemble_struct_mesh

    plan = _read_plan(args.layout)
    cams = {c.id: c for c in _cameras(args.cameras)}
    objects: dict = {}
    for d in args.objects:
        for room, objs in load_object_manifest(d, cams).items():
            objects.setdefault(room, []).extend(objs)
    m_geo, reports = build_m_geo(plan, assemble_struct_mesh(plan), objects)
    export_glb(m_geo, args.out, manifest_path=args.tags)
    _print([r.to_dict() for r in reports])
    return EXIT_OK


def _image_for(images_dir: Path, cam_id: str) -> Path:
    for cand in (images_dir / f"{cam_id}.png", images_dir / f"{cam_id.replace('/', '__')}.png"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no image for camera {cam_id} in {images_dir}")


def cmd_texture(args) -> int:
    from worldmesh.gltf import glb_to_mesh
    from worldmesh.render import load_png, render_depth
    from worldmesh.texproj import TextureAtlas, build_atlas, project_image

    plan = _read_plan(args.layout)
    mesh = glb_to_mesh(args.mesh)
    atlas = TextureAtlas.load(args.atlas) if args.atlas else build_atlas(plan, args.texels_per_meter)
    for cam in _cameras(args.cameras, args.camera):
        img = load_png(_image_for(Path(args.images), cam.id))
        atlas = project_image(mesh, cam, img, render_depth(mesh, cam), cam.room_id, atlas, args.tau)
    atlas.save(args.out)
    _print({"coverage": atlas.coverage()})
    return EXIT_OK


def cmd_verify(args) -> int:
    from worldmesh.adapters import CommandDepthEstimator, ConstantDepthEstimator
    from worldmesh.gltf import glb_to_mesh
    from worldmesh.render import load_depth, load_png, render_depth
    from worldmesh.verify import verify_image

    mesh = glb_to_mesh(args.mesh)
    (cam,) = _cameras(args.cameras, args.camera)
    image = load_png(args.image)
    if args.estimated_depth:
        est = load_depth(args.estimated_depth).values
        adapter = type("FileDepth", (), {"estimate_depth": staticmethod(lambda _img: est)})()
    elif args.depth_estimator == "constant":
        adapter = ConstantDepthEstimator()
    else:
        adapter = CommandDepthEstimator()
    res = verify_image(image, render_depth(mesh, cam), adapter, args.recall_threshold, args.delta)
    _print(res.to_dict())
    return EXIT_OK if res.passed else EXIT_VERIFICATION


def cmd_backproject(args) -> int:
    from worldmesh.gltf import glb_to_mesh
    from worldmesh.recon import backproject, merge_clouds, write_ply
    from worldmesh.render import load_png, render_depth

    mesh = glb_to_mesh(args.mesh)
    clouds = []
    for cam in _cameras(args.cameras, args.camera):
        color = load_png(_image_for(Path(args.images), cam.id)) if args.images else None
        clouds.append(backproject(render_depth(mesh, cam), cam, color, args.stride, exclude_bands=True))
    cloud = merge_clouds(clouds, args.voxel)
    write_ply(cloud, args.out)
    _print({"points": len(cloud), "out": str(args.out)})
    return EXIT_OK


def _config_from_args(args):
    from worldmesh.pipeline import RunConfig

    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    return RunConfig.from_dict(base).validate()


def cmd_generate(args) -> int:
    from worldmesh.pipeline import run_generate, run_stage

    cfg = _config_from_args(args)
    if args.stage:
        entry = run_stage(cfg, args.stage)
        _print({"stage": entry["stage"], "artifacts": len(entry["artifacts"])})
    else:
        manifest = run_generate(cfg)
        _print({"out_dir": cfg.out_dir, "stages": [e["stage"] for e in manifest.stages],
                "artifacts": len(manifest.artifacts)})
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    from worldmesh.pipeline import RunConfig

    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = type(f.default)
        p.add_argument(flag, dest=f.name, type=kind, default=None, help=f"default: {f.default}")


def build_parser() -> argparse.ArgumentParser:
    from worldmesh.render import DEPTH_FAR, DEPTH_NEAR

    ap = argparse.ArgumentParser(prog="worldmesh", description="Floor plan to textured scene scaffold.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-layout", help="check a layout document against the validity rules")
    p.add_argument("layout")
    p.set_defaults(func=cmd_validate_layout)

    p = sub.add_parser("build-mesh", help="structural mesh (walls, floors, ceilings, openings) as GLB")
    p.add_argument("layout")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--tags", help="also write the primitive tag manifest here")
    p.set_defaults(func=cmd_build_mesh)

    p = sub.add_parser("plan-cameras", help="per-room camera poses as JSON lines")
    p.add_argument("layout")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--eye-height", type=float, default=1.6)
    p.add_argument("--wall-offset", type=float, default=0.3)
    p.add_argument("--perimeter-count", type=int, default=16)
    p.add_argument("--overhead-count", type=int, default=8)
    p.add_argument("--width", type=int, default=1376)
    p.add_argument("--height", type=int, default=768)
    p.add_argument("--fov-deg", type=float, default=60.0)
    p.set_defaults(func=cmd_plan_cameras)

    p = sub.add_parser("render", help="depth maps and condition images for cameras")
    p.add_argument("mesh")
    p.add_argument("cameras")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--camera", help="only this camera id")
    p.add_argument("--atlas", help="texture atlas directory")
    p.add_argument("--near", type=float, default=DEPTH_NEAR)
    p.add_argument("--far", type=float, default=DEPTH_FAR)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("place-objects", help="place reconstructed objects and write the furnished mesh")
    p.add_argument("layout")
    p.add_argument("objects", nargs="+", help="directories holding objects.json and meshes")
    p.add_argument("--cameras", required=True, help="cameras the object poses refer to")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--tags")
    p.set_defaults(func=cmd_place_objects)

    p = sub.add_parser("texture", help="project images (named by camera id) into a wall texture atlas")
    p.add_argument("layout")
    p.add_argument("mesh")
    p.add_argument("cameras")
    p.add_argument("images")
    p.add_argument("-o", "--out", required=True, help="atlas directory")
    p.add_argument("--camera")
    p.add_argument("--atlas", help="start from this atlas instead of an empty one")
    p.add_argument("--tau", type=float, default=0.10)
    p.add_argument("--texels-per-meter", type=float, default=64.0)
    p.set_defaults(func=cmd_texture)

    p = sub.add_parser("verify", help="edge recall of an image against the scaffold depth")
    p.add_argument("image")
    p.add_argument("mesh")
    p.add_argument("cameras")
    p.add_argument("--camera", required=True)
    p.add_argument("--estimated-depth", help="depth TIFF of the image (skips the estimator)")
    p.add_argument("--depth-estimator", choices=("command", "constant"), default="command")
    p.add_argument("--delta", type=int, default=10)
    p.add_argument("--recall-threshold", type=float, default=0.6)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("backproject", help="point cloud from scaffold depth, colored by images if given")
    p.add_argument("mesh")
    p.add_argument("cameras")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--images")
    p.add_argument("--camera")
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--voxel", type=float, default=0.02)
    p.set_defaults(func=cmd_backproject)

    p = sub.add_parser("generate", help="full run (or one stage with --stage) into --out-dir")
    p.add_argument("--stage", help="run only this stage against existing artifacts")
    _add_run_flags(p)
    p.set_defaults(func=cmd_generate)
    return ap


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageFailure):
        exc = exc.cause
    if isinstance(exc, VerificationExhausted):
        return EXIT_VERIFICATION
    if isinstance(exc, AdapterFailure):
        return EXIT_ADAPTER
    if isinstance(exc, (ExhaustedAttempts, SchemaError, InvariantError, ValueError)):
        return EXIT_VALIDATION
    return EXIT_ERROR


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (WorldMeshError, ValueError, OSError) as exc:
        print(f"worldmesh: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
