import json
import os

import numpy as np
import pytest

from polarsdf import render
from polarsdf.io import Dataset, DatasetView, save_dataset, load_dataset
from polarsdf.scenes import Scene


def sphere_scene_spec(image_size=32, count=6, radius=0.5, roughness=0.2, fov=30.0):
    return {
        "primitive": {"kind": "sphere", "radius": radius},
        "material": {"albedo": [0.7, 0.6, 0.5], "roughness": roughness, "eta": 1.5},
        "environment": {
            "kind": "lobes",
            "ambient": [0.3, 0.3, 0.32],
            "lobes": [
                {"axis": [0.5, 0.5, 0.7], "sharpness": 6.0, "color": [1.2, 1.1, 0.9]},
                {"axis": [-0.6, 0.2, 0.5], "sharpness": 10.0, "color": [0.5, 0.6, 0.8]},
            ],
        },
        "cameras": {"kind": "fibonacci", "count": count, "radius": 2.5,
                    "fov_deg": fov, "image_size": image_size},
    }


def torus_bump_primitive():
    return {
        "kind": "smooth_union",
        "k": 0.04,
        "parts": [
            {"kind": "torus", "major": 0.32, "minor": 0.14},
            {"kind": "sphere", "radius": 0.1, "center": [0.38, 0.0, 0.1]},
        ],
    }


def torus_scene_spec(image_size=64, count=6):
    return {
        "primitive": torus_bump_primitive(),
        "material": {"albedo": [0.6, 0.55, 0.5], "roughness": 0.2, "eta": 1.5},
        "environment": {
            "kind": "lobes",
            "ambient": [0.3, 0.3, 0.32],
            "lobes": [
                {"axis": [0.5, 0.5, 0.7], "sharpness": 6.0, "color": [1.2, 1.1, 0.9]},
                {"axis": [-0.5, -0.3, 0.4], "sharpness": 8.0, "color": [0.5, 0.7, 0.9]},
            ],
        },
        "cameras": {"kind": "fibonacci", "count": count, "radius": 2.5,
                    "fov_deg": 30.0, "image_size": image_size},
    }


def render_dataset_in_memory(spec: dict, n_quad: int = 256) -> tuple:
    """Render every view of a scene spec and wrap it as a Dataset."""
    scene = Scene.from_spec(spec)
    renders = [render.render_scene(scene, cam, n_quad=n_quad) for cam in scene.cameras]
    views = [
        DatasetView(camera=cam, stokes=vr.image.stokes, mask=vr.image.mask,
                    aop=vr.aop, aop_valid=vr.aop_valid, normals=vr.normals,
                    dominance=vr.dominance, depth=vr.depth)
        for cam, vr in zip(scene.cameras, renders)
    ]
    return Dataset(views=views, material=scene.material, scene_spec=spec), scene, renders


def write_dataset(spec: dict, out_dir, n_quad: int = 256):
    scene = Scene.from_spec(spec)
    renders = [render.render_scene(scene, cam, n_quad=n_quad) for cam in scene.cameras]
    save_dataset(str(out_dir), spec, scene.cameras, renders, seeds={"manifest_seed": 0})
    return load_dataset(str(out_dir)), scene


@pytest.fixture(scope="session")
def small_sphere_data():
    """In-memory 32x32 sphere dataset shared across unit tests."""
    return render_dataset_in_memory(sphere_scene_spec(image_size=32), n_quad=128)


@pytest.fixture(scope="session")
def small_sphere_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sphere32")
    ds, scene = write_dataset(sphere_scene_spec(image_size=32), out, n_quad=128)
    return out, ds, scene


def write_manifest(path, manifest: dict):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return str(path)
