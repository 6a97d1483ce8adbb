import json
import math

import numpy as np
import pytest
from PIL import Image

from birf.data import (
    OracleScene,
    Sphere,
    builtin_scene,
    composite_rgba,
    generate_oracle,
    load_blender,
    load_nsvf,
    load_oracle_scene,
    oracle_splits,
)
from birf.errors import DatasetError
from birf.render import WHITE


def write_blender(root, n=3, size=(8, 6), angle=math.pi / 2):
    root.mkdir(exist_ok=True)
    frames = []
    rng = np.random.default_rng(0)
    for i in range(n):
        rgba = rng.integers(0, 256, (size[1], size[0], 4), dtype=np.uint8)
        Image.fromarray(rgba, "RGBA").save(root / f"r_{i}.png")
        pose = np.eye(4)
        pose[:3, 3] = [0, 0, 4 + i]
        frames.append({"file_path": f"./r_{i}", "transform_matrix": pose.tolist()})
    (root / "transforms_train.json").write_text(json.dumps({"camera_angle_x": angle, "frames": frames}))
    return root


def test_blender_loader(tmp_path):
    ds = load_blender(write_blender(tmp_path / "scene", n=3, size=(800, 2)), "train")
    assert len(ds) == 3
    assert ds.cameras[0].focal == pytest.approx(400.0)
    assert ds.images.shape == (3, 2, 800, 3) and ds.images.dtype == np.float32
    assert 0 <= ds.images.min() and ds.images.max() <= 1
    # [-1.5, 1.5] maps to the unit cube
    np.testing.assert_allclose(ds.scene_transform.to_unit(np.array([-1.5, 0, 1.5])), [0, 0.5, 1])


def test_blender_downscale(tmp_path):
    ds = load_blender(write_blender(tmp_path / "s", size=(8, 6)), "train", downscale=2)
    assert ds.images.shape[1:3] == (3, 4)
    assert ds.cameras[0].focal == pytest.approx(2.0)


def test_blender_errors(tmp_path):
    with pytest.raises(DatasetError, match="transforms_test.json"):
        load_blender(write_blender(tmp_path / "s"), "test")
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "transforms_train.json").write_text(json.dumps({"frames": []}))
    with pytest.raises(DatasetError, match="malformed"):
        load_blender(bad, "train")
    root = write_blender(tmp_path / "m")
    (root / "r_1.png").unlink()
    with pytest.raises(DatasetError, match="r_1.png"):
        load_blender(root, "train")


def test_rgba_zero_alpha_on_white():
    np.testing.assert_array_equal(composite_rgba(np.array([[1.0, 0.0, 0.0, 0.0]]), WHITE), [[1, 1, 1]])
    np.testing.assert_allclose(composite_rgba(np.array([[0.2, 0.4, 0.6, 1.0]]), WHITE), [[0.2, 0.4, 0.6]])


def test_nsvf_loader(tmp_path):
    root = tmp_path / "nsvf"
    (root / "rgb").mkdir(parents=True)
    (root / "pose").mkdir()
    (root / "intrinsics.txt").write_text("10.0 0 4 0\n0 10 3 0\n0 0 1 0\n0 0 0 1\n")
    (root / "bbox.txt").write_text("-1 -1 -1 1 1 1 0.1\n")
    for name in ("0_0000", "0_0001", "2_0000"):
        Image.fromarray(np.zeros((6, 8, 3), np.uint8)).save(root / "rgb" / f"{name}.png")
        np.savetxt(root / "pose" / f"{name}.txt", np.eye(4))
    ds = load_nsvf(root, "train")
    assert len(ds) == 2
    # OpenCV +z forward becomes -z forward
    np.testing.assert_allclose(ds.cameras[0].pose[:3, 2], [0, 0, -1])
    np.testing.assert_allclose(ds.scene_transform.to_unit(np.array([1.0, 1.0, 1.0])), [1, 1, 1])
    with pytest.raises(DatasetError):
        load_nsvf(root, "val")


def test_oracle_empty_scene_is_background():
    ds = generate_oracle(builtin_scene("empty"), 3, 8, seed=0)
    np.testing.assert_array_equal(ds.images, 1.0)


def test_oracle_opaque_center_sphere_albedo():
    scene = builtin_scene("single")
    ds = generate_oracle(scene, 6, 16, seed=1)
    albedo = np.asarray(scene.spheres[0].albedo)
    for img in ds.images:
        center = img[7:9, 7:9].reshape(-1, 3)
        assert np.abs(center - albedo).max() <= 1 / 255


def test_oracle_deterministic():
    a = generate_oracle(builtin_scene("spheres"), 2, 12, seed=5)
    b = generate_oracle(builtin_scene("spheres"), 2, 12, seed=5)
    np.testing.assert_array_equal(a.images, b.images)


def test_oracle_splits_disjoint_cameras():
    tr, te = oracle_splits(builtin_scene("spheres"), 4, 2, 8, seed=0)
    assert len(tr) == 4 and len(te) == 2
    for c in te.cameras:
        assert min(np.linalg.norm(c.pose[:3, 3] - t.pose[:3, 3]) for t in tr.cameras) > 1e-3


def test_scene_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        OracleScene([Sphere((0.9, 0.5, 0.5), 0.2, 10.0, (1, 1, 1))])
    with pytest.raises(DatasetError):
        builtin_scene("teapot")
    scene = builtin_scene("spheres")
    p = tmp_path / "scene.json"
    p.write_text(json.dumps(scene.to_dict()))
    assert load_oracle_scene(str(p)) == scene
