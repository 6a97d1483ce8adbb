"""Datasets: Blender/NSVF-style scene loaders and the analytic sphere oracle."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .render import WHITE, Camera, SceneTransform, focal_from_fov
from .sampler import ray_box

# world-space bounds of the synthetic benchmark scenes
BLENDER_AABB = (-1.5, 1.5)


@dataclass
class Dataset:
    cameras: list[Camera]
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    split: str
    scene_transform: SceneTransform = SceneTransform()
    background: tuple[float, float, float] = WHITE

    def __post_init__(self) -> None:
        if len(self.cameras) != len(self.images):
            raise DatasetError(f"{len(self.cameras)} cameras but {len(self.images)} images")

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]


def _read_image(path: Path, background, downscale: int) -> np.ndarray:
    from PIL import Image

    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    im = im.convert("RGBA")
    if downscale > 1:
        im = im.resize((im.width // downscale, im.height // downscale), Image.BOX)
    return composite_rgba(np.asarray(im, dtype=np.float32) / 255.0, background)


def composite_rgba(rgba: np.ndarray, background) -> np.ndarray:
    """Blend an RGBA image in [0, 1] onto a constant background color."""
    if rgba.shape[-1] == 3:
        return rgba.astype(np.float32)
    a = rgba[..., 3:4]
    return (rgba[..., :3] * a + np.asarray(background, dtype=np.float32) * (1.0 - a)).astype(np.float32)


def load_blender(root, split: str = "train", background=WHITE, downscale: int = 1) -> Dataset:
    """Load ``transforms_<split>.json`` and its frames from a Blender-style scene directory."""
    root = Path(root)
    meta_path = root / f"transforms_{split}.json"
    if not meta_path.is_file():
        raise DatasetError(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        angle = float(meta["camera_angle_x"])
        frames = meta["frames"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed {meta_path}: {exc}") from exc
    if not frames:
        raise DatasetError(f"{meta_path} lists no frames")
    images, poses = [], []
    for i, fr in enumerate(frames):
        try:
            rel = fr["file_path"]
            pose = np.asarray(fr["transform_matrix"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"frame {i} in {meta_path} is malformed: {exc}") from exc
        if pose.shape != (4, 4):
            raise DatasetError(f"frame {i}: transform_matrix must be 4x4, got {pose.shape}")
        path = (root / rel).resolve()
        if path.suffix == "":
            path = path.with_suffix(".png")
        if not path.is_file():
            raise DatasetError(f"frame {i}: image {path} not found")
        images.append(_read_image(path, background, downscale))
        poses.append(pose)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"images in {meta_path} differ in size: {sorted(shapes)}")
    h, w = images[0].shape[:2]
    focal = focal_from_fov(w, angle)
    cams = [Camera(w, h, focal, p) for p in poses]
    return Dataset(cams, np.stack(images), split, SceneTransform.from_aabb(*BLENDER_AABB), tuple(background))


_NSVF_PREFIX = {"train": "0_", "val": "1_", "test": "2_"}


def load_nsvf(root, split: str = "train", background=WHITE, downscale: int = 1) -> Dataset:
    """Load an NSVF-layout scene (``intrinsics.txt``, ``pose/``, ``rgb/``, ``bbox.txt``).

    Poses are OpenCV-style camera-to-world and are converted to the -z forward
    convention; the principal point is assumed to be the image center.
    """
    root = Path(root)
    prefix = _NSVF_PREFIX.get(split)
    if prefix is None:
        raise DatasetError(f"unknown split {split!r}")
    try:
        focal = float((root / "intrinsics.txt").read_text().split()[0])
        bbox = np.array((root / "bbox.txt").read_text().split()[:6], dtype=np.float64)
    except (OSError, IndexError, ValueError) as exc:
        raise DatasetError(f"cannot read NSVF metadata in {root}: {exc}") from exc
    rgb_files = sorted((root / "rgb").glob(f"{prefix}*.png"))
    if not rgb_files:
        raise DatasetError(f"no {split} images under {root / 'rgb'}")
    flip = np.diag([1.0, -1.0, -1.0, 1.0])
    images, cams = [], []
    for f in rgb_files:
        pose_path = root / "pose" / (f.stem + ".txt")
        if not pose_path.is_file():
            raise DatasetError(f"missing pose {pose_path}")
        pose = np.loadtxt(pose_path).reshape(4, 4) @ flip
        img = _read_image(f, background, downscale)
        images.append(img)
        cams.append(Camera(img.shape[1], img.shape[0], focal / downscale, pose))
    lo, hi = bbox[:3], bbox[3:]
    center, half = (lo + hi) / 2, float((hi - lo).max()) / 2
    scale = 1.0 / (2 * half)
    transform = SceneTransform(scale, tuple(0.5 - center * scale))
    return Dataset(cams, np.stack(images), split, transform, tuple(background))


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    density: float
    albedo: tuple[float, float, float]


@dataclass
class OracleScene:
    """Constant-density colored spheres inside the unit cube."""

    spheres: list[Sphere] = field(default_factory=list)
    background: tuple[float, float, float] = WHITE

    def __post_init__(self) -> None:
        for s in self.spheres:
            c = np.asarray(s.center)
            if s.density <= 0 or s.radius <= 0:
                raise ValueError(f"sphere needs positive density and radius: {s}")
            if np.any(c - s.radius < 0) or np.any(c + s.radius > 1):
                raise ValueError(f"sphere leaves the unit cube: {s}")

    @classmethod
    def from_dict(cls, doc: dict) -> "OracleScene":
        spheres = [
            Sphere(tuple(s["center"]), float(s["radius"]), float(s["density"]), tuple(s["albedo"]))
            for s in doc.get("spheres", [])
        ]
        return cls(spheres, tuple(doc.get("background", WHITE)))

    def to_dict(self) -> dict:
        return {
            "spheres": [
                {"center": list(s.center), "radius": s.radius, "density": s.density, "albedo": list(s.albedo)}
                for s in self.spheres
            ],
            "background": list(self.background),
        }

    def density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        sigma = np.zeros(len(x))
        for s in self.spheres:
            inside = np.sum((x - np.asarray(s.center)) ** 2, axis=-1) < s.radius**2
            sigma += inside * s.density
        return sigma

    def __call__(self, x: np.ndarray, d: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Analytic field: density and density-weighted albedo (view independent)."""
        x = np.atleast_2d(x)
        sigma = np.zeros(len(x))
        rgb = np.zeros((len(x), 3))
        for s in self.spheres:
            inside = np.sum((x - np.asarray(s.center)) ** 2, axis=-1) < s.radius**2
            sigma += inside * s.density
            rgb += (inside * s.density)[:, None] * np.asarray(s.albedo)
        rgb = np.where(sigma[:, None] > 0, rgb / np.maximum(sigma, 1e-12)[:, None], 0.0)
        return sigma, rgb


def builtin_scene(name: str = "spheres") -> OracleScene:
    if name == "empty":
        return OracleScene([])
    if name == "single":
        return OracleScene([Sphere((0.5, 0.5, 0.5), 0.25, 200.0, (0.9, 0.3, 0.1))])
    if name == "spheres":
        return OracleScene(
            [
                Sphere((0.42, 0.45, 0.5), 0.2, 150.0, (0.85, 0.2, 0.15)),
                Sphere((0.68, 0.58, 0.38), 0.13, 150.0, (0.15, 0.7, 0.25)),
                Sphere((0.5, 0.72, 0.68), 0.11, 150.0, (0.2, 0.3, 0.9)),
                Sphere((0.3, 0.25, 0.3), 0.08, 150.0, (0.95, 0.85, 0.2)),
            ]
        )
    raise DatasetError(f"unknown built-in oracle scene {name!r} (choose from empty, single, spheres)")


def load_oracle_scene(spec: str) -> OracleScene:
    """A built-in scene name or the path of a JSON scene description."""
    p = Path(spec)
    if p.suffix == ".json" or p.is_file():
        try:
            return OracleScene.from_dict(json.loads(p.read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError(f"cannot read oracle scene {p}: {exc}") from exc
    return builtin_scene(spec)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world matrix looking from ``eye`` to ``target`` (-z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up)) > 0.999:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, true_up, -fwd, eye
    return pose


def fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    r = np.sqrt(1 - z * z)
    phi = k * math.pi * (3 - math.sqrt(5))
    return np.stack([r * np.cos(phi), z, r * np.sin(phi)], axis=-1)


def oracle_render_rays(scene: OracleScene, origins: np.ndarray, dirs: np.ndarray, step: float) -> np.ndarray:
    """Reference midpoint quadrature of the compositing integral over the analytic field.

    Marches from the unit-cube entry point in steps of ``step`` (last one
    clipped at the exit) and accumulates transmittance by running product.
    """
    t0, t1 = ray_box(origins, dirs)
    t0 = np.maximum(t0, 0.0)
    hit = t1 > t0
    t0 = np.where(hit, t0, 0.0)
    t1 = np.where(hit, t1, 0.0)
    span = t1 - t0
    k_max = int(np.ceil(span.max() / step - 1e-9)) if len(span) else 0
    bg = np.asarray(scene.background, dtype=np.float64)
    if k_max == 0:
        return np.broadcast_to(bg, (len(origins), 3)).copy()
    ts = t0[:, None] + np.arange(k_max)[None, :] * step
    te = np.minimum(ts + step, t1[:, None])
    delta = np.maximum(te - ts, 0.0)
    mid = 0.5 * (ts + te)
    pts = origins[:, None, :] + mid[..., None] * dirs[:, None, :]
    sigma, rgb = scene(pts.reshape(-1, 3))
    sigma = sigma.reshape(delta.shape) * (delta > 0)
    rgb = rgb.reshape(delta.shape + (3,))
    alpha = 1.0 - np.exp(-sigma * delta)
    survive = np.cumprod(1.0 - alpha, axis=1)
    trans = np.concatenate([np.ones((len(origins), 1)), survive[:, :-1]], axis=1)
    color = np.sum((trans * alpha)[..., None] * rgb, axis=1)
    return color + survive[:, -1:] * bg


def oracle_cameras(n_views: int, resolution: int, seed: int, radius: float = 2.0, fov: float = math.pi / 3) -> list[Camera]:
    """Fibonacci-sphere rig around the cube center, randomly rotated by ``seed``."""
    from scipy.spatial.transform import Rotation

    dirs = fibonacci_sphere(n_views)
    dirs = Rotation.random(random_state=seed).apply(dirs)
    center = np.full(3, 0.5)
    focal = focal_from_fov(resolution, fov)
    return [Camera(resolution, resolution, focal, look_at(center + radius * d, center)) for d in dirs]


def generate_oracle(
    scene: OracleScene,
    n_views: int,
    resolution: int,
    seed: int,
    step: float = math.sqrt(3) / 512,
    split: str = "train",
    chunk: int = 1024,
) -> Dataset:
    """Render the analytic scene from ``n_views`` cameras; world space is the unit cube."""
    from .render import generate_rays, image_pixels

    cams = oracle_cameras(n_views, resolution, seed)
    images = []
    for cam in cams:
        o, d = generate_rays(cam, image_pixels(cam))
        rows = [oracle_render_rays(scene, o[s : s + chunk], d[s : s + chunk], step) for s in range(0, len(o), chunk)]
        images.append(np.concatenate(rows).reshape(resolution, resolution, 3).astype(np.float32))
    return Dataset(cams, np.stack(images), split, SceneTransform(), tuple(scene.background))


def oracle_splits(scene: OracleScene, n_train: int, n_test: int, resolution: int, seed: int, step: float = math.sqrt(3) / 512):
    """Train and held-out views of the oracle scene from disjoint rotated rigs."""
    return (
        generate_oracle(scene, n_train, resolution, seed, step, "train"),
        generate_oracle(scene, n_test, resolution, seed + 7919, step, "test"),
    )
