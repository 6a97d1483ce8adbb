"""Camera rays and volumetric compositing along rays."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .sampler import DEFAULT_STEP, OccupancyGrid, SampleBatch, march_rays

WHITE = (1.0, 1.0, 1.0)
BLACK = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SceneTransform:
    """Affine map from world coordinates into the unit cube: ``u = scale * p + offset``."""

    scale: float = 1.0
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def from_aabb(cls, lo: float, hi: float) -> "SceneTransform":
        s = 1.0 / (hi - lo)
        return cls(s, (-lo * s,) * 3)

    def to_unit(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p) * self.scale + np.asarray(self.offset)

    def to_world(self, u: np.ndarray) -> np.ndarray:
        return (np.asarray(u) - np.asarray(self.offset)) / self.scale


def focal_from_fov(width: int, camera_angle_x: float) -> float:
    return 0.5 * width / math.tan(0.5 * camera_angle_x)


@dataclass
class Camera:
    """Pinhole camera; ``pose`` is camera-to-world with -z forward, +y up."""

    width: int
    height: int
    focal: float
    pose: np.ndarray

    def __post_init__(self) -> None:
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape == (3, 4):
            self.pose = np.vstack([self.pose, [0, 0, 0, 1]])
        if self.pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {self.pose.shape}")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")


def generate_rays(camera: Camera, pixels: np.ndarray, jitter: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """World-space origins and unit directions through pixel ``(i, j)`` = (column, row)."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    i, j = pixels[:, 0], pixels[:, 1]
    if np.any((i < 0) | (i >= camera.width) | (j < 0) | (j >= camera.height)):
        raise IndexError("pixel outside image")
    jx = jy = 0.0
    if jitter is not None:
        jitter = np.atleast_2d(jitter)
        jx, jy = jitter[:, 0], jitter[:, 1]
    d_cam = np.stack(
        [
            (i + 0.5 + jx - camera.width / 2) / camera.focal,
            -(j + 0.5 + jy - camera.height / 2) / camera.focal,
            -np.ones_like(i),
        ],
        axis=-1,
    )
    d = d_cam @ camera.pose[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.pose[:3, 3], d.shape).copy()
    return o, d


def generate_ray(camera: Camera, pixel, jitter=None) -> tuple[np.ndarray, np.ndarray]:
    o, d = generate_rays(camera, np.asarray(pixel)[None], None if jitter is None else np.asarray(jitter)[None])
    return o[0], d[0]


def image_pixels(camera: Camera) -> np.ndarray:
    jj, ii = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=-1)


@dataclass
class CompositeResult:
    """Per-ray color/opacity plus the per-sample terms needed by the backward pass."""

    color: np.ndarray  # (R, 3)
    opacity: np.ndarray  # (R,)
    weights: np.ndarray  # (S,)  T_i * alpha_i
    trans: np.ndarray  # (S,)  T_i
    alpha: np.ndarray  # (S,)
    final_trans: np.ndarray  # (R,)
    ray_idx: np.ndarray
    slot: np.ndarray  # position of each sample within its ray
    max_len: int


def _slots(ray_idx: np.ndarray, n_rays: int) -> tuple[np.ndarray, int]:
    counts = np.bincount(ray_idx, minlength=n_rays)
    starts = np.cumsum(counts) - counts
    slot = np.arange(len(ray_idx)) - starts[ray_idx]
    return slot, int(counts.max()) if len(counts) else 0


def transmittance(sigma: np.ndarray, delta: np.ndarray, ray_idx: np.ndarray, n_rays: int):
    """Per-sample ``T_i``, ``alpha_i`` and per-ray final transmittance (float64).

    Samples must be grouped by ray and ordered along each ray.
    """
    tau = np.asarray(sigma, dtype=np.float64) * np.asarray(delta, dtype=np.float64)
    slot, max_len = _slots(ray_idx, n_rays)
    pad = np.zeros((n_rays, max_len + 1))
    pad[ray_idx, slot + 1] = tau
    csum = np.cumsum(pad, axis=1)  # csum[r, k] = optical depth before slot k
    trans = np.exp(-csum[ray_idx, slot])
    final = np.exp(-csum[:, -1])
    alpha = -np.expm1(-tau)
    return trans, alpha, final, slot, max_len


def composite(
    sigma: np.ndarray,
    color: np.ndarray,
    delta: np.ndarray,
    ray_idx: np.ndarray | None = None,
    n_rays: int | None = None,
    background=WHITE,
) -> CompositeResult:
    """Alpha-composite samples front to back and blend the remainder onto ``background``.

    With ``ray_idx`` omitted all samples belong to a single ray.
    """
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    color = np.asarray(color, dtype=np.float64).reshape(-1, 3)
    if ray_idx is None:
        ray_idx = np.zeros(len(sigma), dtype=np.int64)
        n_rays = 1
    trans, alpha, final, slot, max_len = transmittance(sigma, delta, ray_idx, n_rays)
    w = trans * alpha
    rgb = np.zeros((n_rays, 3))
    for c in range(3):
        rgb[:, c] = np.bincount(ray_idx, weights=w * color[:, c], minlength=n_rays)
    rgb += final[:, None] * np.asarray(background, dtype=np.float64)
    return CompositeResult(rgb, 1.0 - final, w, trans, alpha, final, ray_idx, slot, max_len)


def composite_backward(
    sigma: np.ndarray,
    color: np.ndarray,
    delta: np.ndarray,
    result: CompositeResult,
    upstream: np.ndarray,
    background=WHITE,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of the composited colors w.r.t. each sample's sigma and color.

    ``d C / d sigma_i = delta_i * (T_{i+1} c_i - S_i)`` where ``S_i`` is the
    color contributed by everything behind sample ``i``, background included.
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    color = np.asarray(color, dtype=np.float64).reshape(-1, 3)
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    ray_idx, slot = result.ray_idx, result.slot
    n_rays = len(result.final_trans)
    g_s = g[ray_idx]
    dcolor = result.weights[:, None] * g_s
    # behind_i = sum_{j > i} w_j (g . c_j) + T_final (g . bg)
    wgc = result.weights * np.einsum("sc,sc->s", g_s, color)
    pad = np.zeros((n_rays, result.max_len))
    pad[ray_idx, slot] = wgc
    incl = np.cumsum(pad, axis=1)
    total = incl[:, -1] + result.final_trans * (g @ np.asarray(background, dtype=np.float64))
    behind = total[ray_idx] - incl[ray_idx, slot]
    t_next = result.trans * (1.0 - result.alpha)
    dsigma = delta * (t_next * np.einsum("sc,sc->s", g_s, color) - behind)
    return dsigma, dcolor


FieldFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def render_rays(
    field,
    occ: OccupancyGrid | None,
    origins: np.ndarray,
    dirs: np.ndarray,
    step: float = DEFAULT_STEP,
    background=WHITE,
    early_stop: float = 1e-4,
    chunk: int = 4096,
) -> np.ndarray:
    """Render unit-cube rays with a :class:`~birf.field.FieldModel` or a ``(x, d) -> (sigma, rgb)`` callable.

    Samples whose transmittance has fallen below ``early_stop`` are dropped
    before colors are evaluated; set ``early_stop=0`` for exact compositing.
    """
    from .field import FieldModel, query_color, query_density

    out = np.empty((len(origins), 3))
    for s in range(0, len(origins), chunk):
        o, d = origins[s : s + chunk], dirs[s : s + chunk]
        samples = march_rays(occ, o, d, step)
        n = len(o)
        if len(samples) == 0:
            out[s : s + n] = background
            continue
        x = samples.positions.astype(np.float32)
        if isinstance(field, FieldModel):
            sigma, emb, _ = query_density(field, x)
        else:
            sigma, rgb = field(samples.positions, d[samples.ray_idx])
        if early_stop > 0:
            trans, *_ = transmittance(sigma, samples.deltas, samples.ray_idx, n)
            keep = trans >= early_stop
            samples = samples.select(keep)
            sigma = sigma[keep]
            if isinstance(field, FieldModel):
                emb = emb[keep]
            else:
                rgb = rgb[keep]
        if isinstance(field, FieldModel):
            rgb = query_color(field, emb, d[samples.ray_idx].astype(np.float32))
        res = composite(sigma, rgb, samples.deltas, samples.ray_idx, n, background)
        out[s : s + n] = res.color
    return out


def render_image(
    field,
    occ: OccupancyGrid | None,
    camera: Camera,
    transform: SceneTransform = SceneTransform(),
    step: float = DEFAULT_STEP,
    background=WHITE,
    early_stop: float = 1e-4,
    chunk: int = 4096,
) -> np.ndarray:
    """Deterministic (unjittered) render of a full image, shape ``(H, W, 3)``."""
    o, d = generate_rays(camera, image_pixels(camera))
    img = render_rays(field, occ, transform.to_unit(o), d, step, background, early_stop, chunk)
    return img.reshape(camera.height, camera.width, 3)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img)).save(path)
