"""Minimal binary glTF 2.0 writer and reader for tagged triangle meshes."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from worldmesh.geom.mesh import TriMesh

GLB_MAGIC = b"glTF"
_JSON_CHUNK = 0x4E4F534A
_BIN_CHUNK = 0x004E4942
_FLOAT = 5126
_UINT32 = 5125
TAG_KEYS = ("room_id", "category", "object_id")
_ARRAY_BUFFER = 34962
_ELEMENT_ARRAY_BUFFER = 34963


@dataclass
class Primitive:
    positions: np.ndarray  # (n, 3) float
    indices: np.ndarray  # (m, 3) int
    extras: dict = field(default_factory=dict)
    uv: np.ndarray | None = None  # (n, 2), glTF convention (origin top-left)
    image: np.ndarray | None = None  # (h, w, 3) uint8


def _png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def _pad4(b: bytes, fill: bytes = b"\x00") -> bytes:
    return b + fill * ((-len(b)) % 4)


def write_glb(path, primitives: list[Primitive], asset_extras: dict | None = None) -> None:
    """Single-buffer GLB: one node/mesh with one primitive per entry."""
    blob = bytearray()
    views, accessors, images, textures, materials, prims = [], [], [], [], [], []

    def add_view(data: bytes, target=None) -> int:
        while len(blob) % 4:  # 4-byte alignment for every view
            blob.append(0)
        view = {"buffer": 0, "byteOffset": len(blob), "byteLength": len(data)}
        if target is not None:
            view["target"] = target
        blob.extend(data)
        views.append(view)
        return len(views) - 1

    def add_accessor(arr: np.ndarray, comp: int, kind: str, target, minmax: bool = False) -> int:
        dtype = np.float32 if comp == _FLOAT else np.uint32
        data = np.ascontiguousarray(arr, dtype=dtype)
        acc = {"bufferView": add_view(data.tobytes(), target), "componentType": comp,
               "count": int(len(arr) if kind != "SCALAR" else data.size), "type": kind}
        if minmax:
            acc["min"] = data.min(axis=0).tolist()
            acc["max"] = data.max(axis=0).tolist()
        accessors.append(acc)
        return len(accessors) - 1

    for p in primitives:
        attrs = {"POSITION": add_accessor(p.positions, _FLOAT, "VEC3", _ARRAY_BUFFER, minmax=True)}
        if p.uv is not None:
            attrs["TEXCOORD_0"] = add_accessor(p.uv, _FLOAT, "VEC2", _ARRAY_BUFFER)
        prim = {"attributes": attrs,
                "indices": add_accessor(np.asarray(p.indices).reshape(-1), _UINT32, "SCALAR",
                                        _ELEMENT_ARRAY_BUFFER),
                "mode": 4, "extras": p.extras}
        if p.image is not None:
            images.append({"bufferView": add_view(_png_bytes(p.image)), "mimeType": "image/png"})
            textures.append({"source": len(images) - 1})
            materials.append({"pbrMetallicRoughness": {"baseColorTexture": {"index": len(textures) - 1},
                                                       "metallicFactor": 0.0, "roughnessFactor": 1.0}})
            prim["material"] = len(materials) - 1
        prims.append(prim)

    while len(blob) % 4:
        blob.append(0)
    doc = {
        "asset": {"version": "2.0", "generator": "worldmesh", "extras": asset_extras or {}},
        "scene": 0,
        "scenes": [{"nodes": [0]}],
        "nodes": [{"mesh": 0}],
        "meshes": [{"primitives": prims}],
        "buffers": [{"byteLength": len(blob)}],
        "bufferViews": views,
        "accessors": accessors,
    }
    if images:
        doc.update(images=images, textures=textures, materials=materials)
    js = _pad4(json.dumps(doc, separators=(",", ":"), sort_keys=True).encode(), b" ")
    body = bytes(blob)
    total = 12 + 8 + len(js) + 8 + len(body)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", GLB_MAGIC, 2, total))
        fh.write(struct.pack("<II", len(js), _JSON_CHUNK))
        fh.write(js)
        fh.write(struct.pack("<II", len(body), _BIN_CHUNK))
        fh.write(body)


def read_glb(path) -> tuple[dict, list[Primitive]]:
    raw = Path(path).read_bytes()
    magic, version, total = struct.unpack_from("<4sII", raw, 0)
    if magic != GLB_MAGIC or version != 2 or total != len(raw):
        raise ValueError("not a glTF 2.0 binary file")
    jlen, jtype = struct.unpack_from("<II", raw, 12)
    doc = json.loads(raw[20:20 + jlen])
    off = 20 + jlen
    blen, btype = struct.unpack_from("<II", raw, off)
    if jtype != _JSON_CHUNK or btype != _BIN_CHUNK:
        raise ValueError("unexpected chunk layout")
    body = raw[off + 8:off + 8 + blen]

    def view_bytes(i):
        v = doc["bufferViews"][i]
        return body[v.get("byteOffset", 0):v.get("byteOffset", 0) + v["byteLength"]]

    def accessor(i):
        a = doc["accessors"][i]
        dtype = np.float32 if a["componentType"] == _FLOAT else np.uint32
        width = {"SCALAR": 1, "VEC2": 2, "VEC3": 3}[a["type"]]
        arr = np.frombuffer(view_bytes(a["bufferView"]), dtype=dtype)
        return arr.reshape(-1, width) if width > 1 else arr

    out = []
    for prim in doc["meshes"][0]["primitives"]:
        uv = accessor(prim["attributes"]["TEXCOORD_0"]) if "TEXCOORD_0" in prim["attributes"] else None
        image = None
        if "material" in prim:
            tex = doc["materials"][prim["material"]]["pbrMetallicRoughness"]["baseColorTexture"]["index"]
            src = doc["images"][doc["textures"][tex]["source"]]
            image = np.asarray(Image.open(io.BytesIO(view_bytes(src["bufferView"]))).convert("RGB"))
        out.append(Primitive(accessor(prim["attributes"]["POSITION"]).astype(np.float64),
                             accessor(prim["indices"]).reshape(-1, 3).astype(np.int64),
                             prim.get("extras", {}), uv, image))
    return doc, out


def glb_to_mesh(path) -> TriMesh:
    """Re-import a GLB written by ``export_glb``; tags come from primitive extras.

    Object primitives keep their texture coordinates (v up) and texture.
    """
    _, prims = read_glb(path)
    parts = []
    for p in prims:
        ex = p.extras
        cat, oid = ex.get("category", "wall"), ex.get("object_id", "")
        uv, textures = None, {}
        if cat == "object" and p.uv is not None and p.image is not None:
            uv = np.column_stack([p.uv[:, 0], 1.0 - p.uv[:, 1]]).astype(np.float64)
            textures = {oid: p.image}
        mesh = TriMesh.from_arrays(p.positions, p.indices, room=ex.get("room_id", ""), category=cat,
                                   object_id=oid, surface=ex.get("surface_ids", ""), uv=uv, textures=textures,
                                   drop_degenerate=False)
        parts.append(mesh)
    return TriMesh.merge(parts)


def _group_primitive(mesh: TriMesh, key, atlas) -> Primitive:
    room, cat, oid = key
    sel = np.flatnonzero((mesh.room == room) & (mesh.category == cat) & (mesh.object_id == oid))
    extras = {"room_id": room, "category": cat, "object_id": oid}
    if (mesh.surface[sel] != "").any():
        # per-triangle surface ids, in primitive triangle order, so re-imports keep texture charts addressable
        extras["surface_ids"] = mesh.surface[sel].tolist()
    faces = mesh.faces[sel]
    if cat != "object" and atlas is not None:
        baked = atlas.bake(mesh, sel)
        if baked is not None:
            positions, uv, image = baked
            return Primitive(positions, np.arange(len(positions)).reshape(-1, 3), extras, uv, image)
    used, inverse = np.unique(faces, return_inverse=True)
    prim = Primitive(mesh.vertices[used], inverse.reshape(-1, 3), extras)
    if cat == "object" and mesh.uv is not None and oid in mesh.textures:
        uv = mesh.uv[used]
        if np.isfinite(uv).all():
            prim.uv = np.column_stack([uv[:, 0], 1.0 - uv[:, 1]])
            prim.image = np.asarray(mesh.textures[oid])
    return prim


def export_glb(mesh: TriMesh, path, atlas=None, manifest_path=None) -> list[dict]:
    """Write ``mesh`` as GLB with one primitive per (room, category, object) group.

    With an atlas, structural primitives carry baked UVs and an embedded
    texture; object primitives use their own UVs and textures when present.
    Returns the tag manifest (primitive index -> tags), also written as JSON
    when ``manifest_path`` is given.
    """
    if mesh.n_faces == 0:
        raise ValueError("cannot export an empty mesh")
    groups = mesh.tag_groups()
    prims = [_group_primitive(mesh, g, atlas) for g in groups]
    write_glb(path, prims)
    manifest = [{"primitive": i, **{k: p.extras[k] for k in TAG_KEYS}} for i, p in enumerate(prims)]
    if manifest_path is not None:
        Path(manifest_path).write_text(json.dumps(manifest, indent=2))
    return manifest
