import json

import numpy as np
import pytest

from polarsdf import io as pio
from polarsdf.errors import InvalidInputError
from polarsdf.fields import Mesh

from conftest import sphere_scene_spec, write_dataset


def test_pfm_round_trip_gray_and_color(tmp_path):
    rng = np.random.default_rng(0)
    gray = rng.normal(size=(7, 5)).astype(np.float32).astype(np.float64)
    color = rng.normal(size=(6, 9, 3)).astype(np.float32).astype(np.float64)
    p1, p2 = tmp_path / "g.pfm", tmp_path / "c.pfm"
    pio.write_pfm(p1, gray)
    pio.write_pfm(p2, color)
    assert np.array_equal(pio.read_pfm(p1), gray)
    assert np.array_equal(pio.read_pfm(p2), color)
    # byte-deterministic writer
    p3 = tmp_path / "g2.pfm"
    pio.write_pfm(p3, gray)
    assert p1.read_bytes() == p3.read_bytes()
    with pytest.raises(InvalidInputError):
        pio.write_pfm(tmp_path / "bad.pfm", np.zeros((2, 2, 4)))
    with pytest.raises(InvalidInputError):
        pio.read_pfm(__file__)


def test_mask_png_round_trip(tmp_path):
    mask = np.zeros((8, 6), dtype=bool)
    mask[2:5, 1:4] = True
    path = tmp_path / "m.png"
    pio.write_mask_png(path, mask)
    assert np.array_equal(pio.read_mask_png(path), mask)


def test_obj_round_trip(tmp_path):
    mesh = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0.5]]),
                np.array([[0, 1, 2]]), np.array([[0.0, 0, 1]] * 3))
    path = tmp_path / "m.obj"
    pio.save_obj(path, mesh)
    loaded = pio.load_obj(path)
    assert np.allclose(loaded.vertices, mesh.vertices, atol=1e-8)
    assert np.array_equal(loaded.faces, mesh.faces)
    text = path.read_text()
    assert text.startswith("v ")
    assert "vn" in text


def test_dataset_round_trip(tmp_path):
    spec = sphere_scene_spec(image_size=16, count=2)
    ds, scene = write_dataset(spec, tmp_path / "ds", n_quad=48)
    assert len(ds.views) == 2
    view = ds.views[0]
    assert view.stokes.shape == (16, 16, 3, 4)
    assert view.mask.any()
    assert view.normals is not None
    # masked-in stokes survive the float32 storage round trip closely
    assert np.all(np.isfinite(view.stokes[view.mask]))
    # manifest carries row-major K/R/t per view
    man = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert man["format"] == "polarsdf-dataset"
    assert len(man["views"][0]["camera"]["k"]) == 9
    assert len(man["views"][0]["camera"]["r"]) == 9
    assert len(man["views"][0]["camera"]["t"]) == 3


def test_dataset_rejects_nonzero_s3(tmp_path):
    spec = sphere_scene_spec(image_size=16, count=2)
    write_dataset(spec, tmp_path / "ds", n_quad=48)
    bad = pio.read_pfm(tmp_path / "ds" / "view_000" / "s3.pfm")
    bad[3, 3] = 0.5
    pio.write_pfm(tmp_path / "ds" / "view_000" / "s3.pfm", bad)
    with pytest.raises(InvalidInputError):
        pio.load_dataset(tmp_path / "ds")


def test_load_dataset_missing_manifest(tmp_path):
    with pytest.raises(InvalidInputError):
        pio.load_dataset(tmp_path)


def test_manifest_validation_rejects_unknown_keys():
    good = {"scene": sphere_scene_spec(image_size=8, count=2), "seed": 1}
    pio.validate_render_manifest(good)
    with pytest.raises(InvalidInputError, match="unknown keys"):
        pio.validate_render_manifest({**good, "mystery": 1})
    bad_scene = json.loads(json.dumps(good))
    bad_scene["scene"]["primitive"]["squishiness"] = 3
    with pytest.raises(InvalidInputError, match="unknown keys"):
        pio.validate_render_manifest(bad_scene)
    bad_env = json.loads(json.dumps(good))
    bad_env["scene"]["environment"]["lobes"][0]["wavelength"] = 500
    with pytest.raises(InvalidInputError, match="unknown keys"):
        pio.validate_render_manifest(bad_env)
    with pytest.raises(InvalidInputError, match="missing"):
        pio.validate_render_manifest({"seed": 3})


def test_manifest_validation_primitive_kinds():
    with pytest.raises(InvalidInputError, match="unknown primitive kind"):
        pio.validate_primitive({"kind": "banana"})
    nested = {"kind": "smooth_union", "k": 0.1, "parts": [
        {"kind": "sphere", "radius": 0.2},
        {"kind": "torus", "major": 0.3, "minor": 0.1, "squeak": 1}]}
    with pytest.raises(InvalidInputError, match=r"parts\[1\]"):
        pio.validate_primitive(nested)


def test_reconstruct_manifest_validation():
    pio.validate_reconstruct_manifest({"dataset": "x", "train": {"iterations": 10}})
    with pytest.raises(InvalidInputError):
        pio.validate_reconstruct_manifest({"dataset": "x", "train": {"nope": 1}})
    with pytest.raises(InvalidInputError):
        pio.validate_reconstruct_manifest({"train": {}})
