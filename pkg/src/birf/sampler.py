"""Occupancy grid and fixed-step ray marching through the unit cube."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .binarize import PackedBits, pack_bits

DEFAULT_STEP = math.sqrt(3) / 1024

DensityFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class OccupancyGrid:
    resolution: int = 128
    threshold: float = 0.01
    decay: float = 0.95
    update_interval: int = 16
    warmup_iters: int = 256
    occ_values: np.ndarray = field(default=None, repr=False)
    occupied: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        n = self.resolution**3
        if self.occ_values is None:
            self.occ_values = np.zeros(n, dtype=np.float32)
        if self.occupied is None:
            self.occupied = np.ones(n, dtype=bool)

    @property
    def bitfield(self) -> PackedBits:
        return pack_bits(np.where(self.occupied, 1, -1))

    @property
    def occupied_fraction(self) -> float:
        return float(self.occupied.mean())

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        ijk = np.clip(np.floor(x * self.resolution).astype(np.int64), 0, self.resolution - 1)
        r = self.resolution
        return ijk[..., 0] + r * ijk[..., 1] + r * r * ijk[..., 2]

    def cell_coords(self) -> np.ndarray:
        r = self.resolution
        k = np.arange(r**3)
        return np.stack([k % r, (k // r) % r, k // (r * r)], axis=-1)

    def rebuild_bits(self) -> None:
        self.occupied = self.occ_values > self.threshold


def _density_fn(model) -> DensityFn:
    if callable(model):
        return model
    from .field import query_density

    return lambda x: query_density(model, x)[0]


def _cell_alphas(occ: OccupancyGrid, density_fn: DensityFn, jitter: np.ndarray, chunk: int = 1 << 16) -> np.ndarray:
    coords = occ.cell_coords()
    out = np.empty(len(coords), dtype=np.float32)
    cell = 1.0 / occ.resolution
    for s in range(0, len(coords), chunk):
        x = (coords[s : s + chunk] + jitter[s : s + chunk]) * cell
        sigma = np.asarray(density_fn(x.astype(np.float32)), dtype=np.float64)
        out[s : s + chunk] = -np.expm1(-sigma * cell)
    return out


def update_occupancy(occ: OccupancyGrid, model, it: int, rng: np.random.Generator, force: bool = False) -> bool:
    """EMA update of cell alphas every ``update_interval`` iterations.

    ``model`` is a :class:`~birf.field.FieldModel` or a density callable.
    Returns True when an update ran. During warmup every cell stays marked
    occupied regardless of its value.
    """
    if not force and it % occ.update_interval != 0:
        return False
    jitter = rng.random((occ.resolution**3, 3))
    alpha = _cell_alphas(occ, _density_fn(model), jitter)
    occ.occ_values = np.maximum(occ.occ_values * np.float32(occ.decay), alpha)
    if it < occ.warmup_iters:
        occ.occupied = np.ones_like(occ.occupied)
    else:
        occ.rebuild_bits()
    return True


def rebuild_occupancy(occ: OccupancyGrid, model, passes: int = 4, seed: int = 0) -> None:
    """Recompute occupancy from scratch: per-cell max alpha over ``passes`` jittered probes."""
    rng = np.random.default_rng(seed)
    fn = _density_fn(model)
    vals = np.zeros(occ.resolution**3, dtype=np.float32)
    for _ in range(passes):
        vals = np.maximum(vals, _cell_alphas(occ, fn, rng.random((occ.resolution**3, 3))))
    occ.occ_values = vals
    occ.rebuild_bits()


def ray_box(origins: np.ndarray, dirs: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Slab-method entry/exit parameters against the axis-aligned box ``[lo, hi]**3``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (lo - origins) * inv
        t_hi = (hi - origins) * inv
    t_a = np.fmin(t_lo, t_hi)
    t_b = np.fmax(t_lo, t_hi)
    # axis-parallel rays: an origin outside the slab gives nan/inf, handled here
    parallel = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    t_a = np.where(parallel, np.where(inside, -np.inf, np.inf), t_a)
    t_b = np.where(parallel, np.where(inside, np.inf, -np.inf), t_b)
    return t_a.max(axis=-1), t_b.min(axis=-1)


@dataclass
class RaySample:
    t_start: float
    t_end: float
    position: np.ndarray

    @property
    def delta(self) -> float:
        return self.t_end - self.t_start


@dataclass
class SampleBatch:
    """Flat samples for a batch of rays, grouped by ray and ordered by ``t``."""

    ray_idx: np.ndarray
    t_start: np.ndarray
    t_end: np.ndarray
    positions: np.ndarray
    n_rays: int

    @property
    def deltas(self) -> np.ndarray:
        return self.t_end - self.t_start

    def __len__(self) -> int:
        return len(self.ray_idx)

    def select(self, keep: np.ndarray) -> "SampleBatch":
        return SampleBatch(self.ray_idx[keep], self.t_start[keep], self.t_end[keep], self.positions[keep], self.n_rays)


def march_rays(
    occ: OccupancyGrid | None,
    origins: np.ndarray,
    dirs: np.ndarray,
    step: float = DEFAULT_STEP,
    near: float = 0.0,
    far: float = np.inf,
) -> SampleBatch:
    """Fixed-step midpoint samples inside the unit cube, kept only in occupied cells.

    ``dirs`` must be unit length so ``t`` measures distance. Passing
    ``occ=None`` keeps every sample (dense marching).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if np.any(np.linalg.norm(dirs, axis=-1) == 0):
        raise ValueError("ray direction must be non-zero")
    n_rays = len(origins)
    t0, t1 = ray_box(origins, dirs)
    t0 = np.maximum(t0, near)
    t1 = np.minimum(t1, far)
    hit = t1 > t0
    span = np.where(hit, t1 - t0, 0.0)
    counts = np.ceil(span / step - 1e-9).astype(np.int64)
    counts[~hit] = 0
    total = int(counts.sum())
    ray_idx = np.repeat(np.arange(n_rays), counts)
    starts = np.cumsum(counts) - counts
    k = np.arange(total) - np.repeat(starts, counts)
    ts = t0[ray_idx] + k * step
    te = np.minimum(ts + step, t1[ray_idx])
    mid = 0.5 * (ts + te)
    pos = origins[ray_idx] + mid[:, None] * dirs[ray_idx]
    keep = te > ts
    if occ is not None:
        keep &= occ.occupied[occ.cell_index(pos)]
    return SampleBatch(ray_idx[keep], ts[keep], te[keep], pos[keep], n_rays)


def march_ray(occ: OccupancyGrid | None, origin, direction, step: float = DEFAULT_STEP, near: float = 0.0, far: float = np.inf) -> list[RaySample]:
    """Single-ray form of :func:`march_rays`."""
    d = np.asarray(direction, dtype=np.float64)
    nrm = np.linalg.norm(d)
    if nrm == 0:
        raise ValueError("ray direction must be non-zero")
    b = march_rays(occ, np.asarray(origin, dtype=np.float64)[None], (d / nrm)[None], step, near, far)
    return [RaySample(float(a), float(e), p) for a, e, p in zip(b.t_start, b.t_end, b.positions)]
