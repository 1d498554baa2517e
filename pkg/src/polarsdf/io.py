"""File formats and the on-disk dataset layout.

A dataset directory holds manifest.json plus one subdirectory per view:
s0..s3.pfm (3-channel Stokes components), mask.png, normal.pfm, aop.pfm,
dominance.png (0 degenerate/miss, 1 diffuse, 2 specular) and the ld/ls/depth
diagnostic maps.  PFM files are little-endian float32 with bottom-up rows
(standard Portable Float Map).  All writers are byte-deterministic.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import InvalidInputError
from .geometry import Camera
from .pbrdf import Material
from .polarimetry import aop_map

# ---------------------------------------------------------------------------
# PFM


def write_pfm(path, data: np.ndarray):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF\n"
    else:
        raise InvalidInputError(f"PFM supports (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")  # negative scale: little endian
        fh.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise InvalidInputError(f"not a PFM file: {path}")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        count = w * h * (3 if kind == b"PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(count * 4), dtype=dtype, count=count)
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)


# ---------------------------------------------------------------------------
# PNG helpers (Pillow writes no timestamps; outputs are reproducible)


def write_mask_png(path, mask: np.ndarray):
    arr = (np.asarray(mask, dtype=bool) * np.uint8(255))
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def write_gray_png(path, values: np.ndarray):
    Image.fromarray(np.asarray(values, dtype=np.uint8), mode="L").save(path, format="PNG")


def read_gray_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"))


def write_rgb_png(path, rgb01: np.ndarray):
    arr = np.clip(np.asarray(rgb01) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# OBJ


def save_obj(path, mesh):
    """Deterministic OBJ export with per-vertex normals when available."""
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}")
    has_n = mesh.normals is not None and len(mesh.normals) == len(mesh.vertices)
    if has_n:
        for n in mesh.normals:
            lines.append(f"vn {n[0]:.8f} {n[1]:.8f} {n[2]:.8f}")
    for f in mesh.faces:
        a, b, c = int(f[0]) + 1, int(f[1]) + 1, int(f[2]) + 1
        if has_n:
            lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
        else:
            lines.append(f"f {a} {b} {c}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path):
    from .fields import Mesh
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# dataset container


STOKES_FILES = ("s0.pfm", "s1.pfm", "s2.pfm", "s3.pfm")


@dataclass
class DatasetView:
    camera: Camera
    stokes: np.ndarray          # (H, W, 3, 4)
    mask: np.ndarray            # (H, W) bool
    aop: np.ndarray             # (H, W)
    aop_valid: np.ndarray       # (H, W) bool
    normals: np.ndarray = None  # (H, W, 3) ground truth, optional
    dominance: np.ndarray = None
    depth: np.ndarray = None


@dataclass
class Dataset:
    views: list
    material: Material
    scene_spec: dict = field(default_factory=dict)
    path: str = ""


def save_dataset(out_dir, scene_spec: dict, cameras: list, renders: list,
                 seeds: dict = None) -> str:
    """Write the dataset layout consumed by reconstruction."""
    os.makedirs(out_dir, exist_ok=True)
    views_entry = []
    for i, (cam, view) in enumerate(zip(cameras, renders)):
        vdir = f"view_{i:03d}"
        full = os.path.join(out_dir, vdir)
        os.makedirs(full, exist_ok=True)
        for ci, name in enumerate(STOKES_FILES):
            write_pfm(os.path.join(full, name), view.image.stokes[..., ci])
        write_mask_png(os.path.join(full, "mask.png"), view.image.mask)
        write_pfm(os.path.join(full, "normal.pfm"), view.normals)
        write_pfm(os.path.join(full, "aop.pfm"), view.aop)
        write_gray_png(os.path.join(full, "dominance.png"), view.dominance)
        write_pfm(os.path.join(full, "ld.pfm"), view.l_d)
        write_pfm(os.path.join(full, "ls.pfm"), view.l_s)
        write_pfm(os.path.join(full, "depth.pfm"), view.depth)
        views_entry.append({"dir": vdir, "camera": cam.to_dict()})
    manifest = {
        "format": "polarsdf-dataset",
        "version": 1,
        "scene": scene_spec,
        "material": scene_spec["material"],
        "environment": scene_spec["environment"],
        "views": views_entry,
        "seeds": seeds or {},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir


def load_dataset(path) -> Dataset:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise InvalidInputError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "polarsdf-dataset":
        raise InvalidInputError("manifest is not a polarsdf dataset manifest")
    material = Material.from_dict(manifest["material"])
    views = []
    for entry in manifest["views"]:
        full = os.path.join(path, entry["dir"])
        cam = Camera.from_dict(entry["camera"])
        comps = [read_pfm(os.path.join(full, name)) for name in STOKES_FILES]
        if np.any(comps[3] != 0.0):
            raise InvalidInputError(f"nonzero s3 component in {entry['dir']}")
        stokes = np.stack(comps, axis=-1)  # (H, W, 3, 4)
        mask = read_mask_png(os.path.join(full, "mask.png"))
        if mask.shape != stokes.shape[:2]:
            raise InvalidInputError("mask dimensions differ from Stokes images")
        aop = read_pfm(os.path.join(full, "aop.pfm"))
        dom_path = os.path.join(full, "dominance.png")
        dominance = read_gray_png(dom_path) if os.path.exists(dom_path) else None
        _, valid = aop_map(stokes.sum(axis=2))
        valid &= mask
        normal_path = os.path.join(full, "normal.pfm")
        normals = read_pfm(normal_path) if os.path.exists(normal_path) else None
        depth_path = os.path.join(full, "depth.pfm")
        depth = read_pfm(depth_path) if os.path.exists(depth_path) else None
        views.append(DatasetView(camera=cam, stokes=stokes, mask=mask, aop=aop,
                                 aop_valid=valid, normals=normals,
                                 dominance=dominance, depth=depth))
    return Dataset(views=views, material=material,
                   scene_spec=manifest.get("scene", {}), path=str(path))


# ---------------------------------------------------------------------------
# run manifest validation (unknown keys rejected at every level)


def _check_keys(d: dict, allowed: set, required: set, where: str):
    if not isinstance(d, dict):
        raise InvalidInputError(f"{where} must be an object")
    unknown = set(d) - allowed
    if unknown:
        raise InvalidInputError(f"unknown keys in {where}: {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise InvalidInputError(f"missing keys in {where}: {sorted(missing)}")


_PRIMITIVE_KEYS = {
    "sphere": {"kind", "radius", "center"},
    "torus": {"kind", "major", "minor", "center"},
    "rounded_box": {"kind", "half_extents", "radius", "center"},
    "smooth_union": {"kind", "parts", "k"},
    "empty": {"kind"},
}


def validate_primitive(spec, where="scene.primitive"):
    _check_keys(spec, {"kind"} | set().union(*_PRIMITIVE_KEYS.values()), {"kind"}, where)
    kind = spec["kind"]
    if kind not in _PRIMITIVE_KEYS:
        raise InvalidInputError(f"{where}: unknown primitive kind {kind!r}")
    _check_keys(spec, _PRIMITIVE_KEYS[kind], {"kind"}, where)
    if kind == "smooth_union":
        for i, part in enumerate(spec["parts"]):
            validate_primitive(part, f"{where}.parts[{i}]")


def validate_scene_spec(spec: dict):
    _check_keys(spec, {"primitive", "material", "environment", "cameras"},
                {"primitive", "material", "environment", "cameras"}, "scene")
    validate_primitive(spec["primitive"])
    _check_keys(spec["material"], {"albedo", "roughness", "eta"},
                {"albedo", "roughness"}, "scene.material")
    env = spec["environment"]
    kind = env.get("kind")
    if kind == "lobes":
        _check_keys(env, {"kind", "ambient", "lobes"}, {"kind"}, "scene.environment")
        for i, lobe in enumerate(env.get("lobes", [])):
            _check_keys(lobe, {"axis", "sharpness", "color"},
                        {"axis", "sharpness", "color"}, f"scene.environment.lobes[{i}]")
    elif kind == "sh":
        _check_keys(env, {"kind", "coeffs"}, {"kind", "coeffs"}, "scene.environment")
    else:
        raise InvalidInputError(f"scene.environment: unknown kind {kind!r}")
    cams = spec["cameras"]
    ckind = cams.get("kind")
    if ckind == "fibonacci":
        _check_keys(cams, {"kind", "count", "radius", "fov_deg", "image_size"},
                    {"kind", "count"}, "scene.cameras")
    elif ckind == "ring":
        _check_keys(cams, {"kind", "count", "radius", "elevation_deg", "fov_deg",
                           "image_size"}, {"kind", "count"}, "scene.cameras")
    elif ckind == "lookat_list":
        _check_keys(cams, {"kind", "eyes", "image_size"}, {"kind", "eyes"}, "scene.cameras")
        for i, e in enumerate(cams["eyes"]):
            _check_keys(e, {"eye", "fov_deg"}, {"eye"}, f"scene.cameras.eyes[{i}]")
    elif ckind == "explicit":
        _check_keys(cams, {"kind", "cameras"}, {"kind", "cameras"}, "scene.cameras")
    else:
        raise InvalidInputError(f"scene.cameras: unknown kind {ckind!r}")


def validate_render_manifest(man: dict):
    _check_keys(man, {"name", "seed", "scene", "output_dir", "quadrature"},
                {"scene"}, "manifest")
    validate_scene_spec(man["scene"])


def validate_reconstruct_manifest(man: dict):
    _check_keys(man, {"name", "seed", "dataset", "output_dir", "train"},
                {"dataset"}, "manifest")
    from .optim import TrainConfig
    TrainConfig.from_dict(man.get("train", {}))
