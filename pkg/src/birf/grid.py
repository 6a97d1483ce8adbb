"""Multi-resolution hash grids over binarized parameters.

One 3D grid plus three axis-aligned 2D plane grids (xy, xz, yz). Each level
is a virtual vertex lattice of ``N + 1`` points per axis; it is stored
densely when ``(N + 1)**dim`` fits in the level's table and through a
spatial hash otherwise. Forward lookups read ``sign(latent)`` and
interpolate; the backward pass scatters gradients onto the latents through
the straight-through mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .binarize import STE_BOUND, BinaryTensor
from .errors import ConfigError

HASH_PRIMES = (1, 2654435761, 805459861)
PLANES = ("xy", "xz", "yz")
PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}
SUPPORTED_FEATURE_DIMS = (1, 2, 4, 8)


@dataclass(frozen=True)
class GridLevelConfig:
    dim: int
    resolution: int
    table_size: int
    feature_dim: int = 1

    def __post_init__(self) -> None:
        if self.dim not in (2, 3):
            raise ConfigError(f"grid dim must be 2 or 3, got {self.dim}")
        if self.resolution < 1:
            raise ConfigError(f"resolution must be >= 1, got {self.resolution}")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ConfigError(f"table_size must be a power of two, got {self.table_size}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")

    @property
    def dense_size(self) -> int:
        return (self.resolution + 1) ** self.dim

    @property
    def is_dense(self) -> bool:
        return self.dense_size <= self.table_size

    @property
    def entries(self) -> int:
        return min(self.dense_size, self.table_size)

    @property
    def bits(self) -> int:
        return self.entries * self.feature_dim


def geometric_resolutions(n_min: int, n_max: int, n_levels: int) -> list[int]:
    """``floor(n_min * b**l)`` with ``b`` chosen so the last level is ``n_max``."""
    if n_levels < 1:
        return []
    if n_levels == 1:
        return [n_min]
    b = math.exp((math.log(n_max) - math.log(n_min)) / (n_levels - 1))
    # the epsilon keeps exact powers (e.g. 64 * 2**3) from rounding down
    return [int(math.floor(n_min * b**l + 1e-9)) for l in range(n_levels)]


@dataclass(frozen=True)
class GridConfig:
    levels_3d: tuple[GridLevelConfig, ...]
    levels_2d: tuple[GridLevelConfig, ...]
    feature_dim: int

    def __post_init__(self) -> None:
        for lv in self.levels_3d:
            if lv.dim != 3 or lv.feature_dim != self.feature_dim:
                raise ConfigError(f"inconsistent 3D level {lv}")
        for lv in self.levels_2d:
            if lv.dim != 2 or lv.feature_dim != self.feature_dim:
                raise ConfigError(f"inconsistent 2D level {lv}")

    @classmethod
    def geometric(
        cls,
        feature_dim: int = 1,
        n_levels_3d: int = 16,
        min_res_3d: int = 16,
        max_res_3d: int = 1024,
        table_size_3d: int = 2**19,
        n_levels_2d: int = 4,
        min_res_2d: int = 64,
        max_res_2d: int = 512,
        table_size_2d: int = 2**17,
    ) -> "GridConfig":
        """Build a config from resolution ranges; defaults are the base model."""
        lv3 = tuple(
            GridLevelConfig(3, n, table_size_3d, feature_dim)
            for n in geometric_resolutions(min_res_3d, max_res_3d, n_levels_3d)
        )
        lv2 = tuple(
            GridLevelConfig(2, n, table_size_2d, feature_dim)
            for n in geometric_resolutions(min_res_2d, max_res_2d, n_levels_2d)
        )
        return cls(lv3, lv2, feature_dim)

    @property
    def feature_width(self) -> int:
        return (len(self.levels_3d) + 3 * len(self.levels_2d)) * self.feature_dim


def payload_bits(config: GridConfig) -> int:
    """Total number of binary grid parameters (one bit each)."""
    return sum(lv.bits for lv in config.levels_3d) + 3 * sum(lv.bits for lv in config.levels_2d)


def grid_index(level: GridLevelConfig, corner) -> np.ndarray | int:
    """Table slot of integer vertex coordinates ``corner`` (shape ``(..., dim)``)."""
    c = np.asarray(corner, dtype=np.int64)
    scalar = c.ndim == 1
    c = np.atleast_2d(c)
    if c.shape[-1] != level.dim:
        raise ConfigError(f"corner has {c.shape[-1]} coordinates, level is {level.dim}D")
    if c.size and (c.min() < 0 or c.max() > level.resolution):
        raise IndexError(f"corner outside [0, {level.resolution}]")
    idx = _index(level, c)
    return int(idx[0]) if scalar else idx


def _index(level: GridLevelConfig, c: np.ndarray) -> np.ndarray:
    if level.is_dense:
        stride = level.resolution + 1
        idx = c[..., 0].copy()
        mul = stride
        for i in range(1, level.dim):
            idx += c[..., i] * mul
            mul *= stride
        return idx
    cu = c.astype(np.uint64)
    h = cu[..., 0] * np.uint64(HASH_PRIMES[0])
    for i in range(1, level.dim):
        h ^= cu[..., i] * np.uint64(HASH_PRIMES[i])
    return (h & np.uint64(level.table_size - 1)).astype(np.int64)


_CORNER_BITS = {d: np.array([[(k >> i) & 1 for i in range(d)] for k in range(2**d)], dtype=np.int64) for d in (2, 3)}


def level_lookup(level: GridLevelConfig, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Corner slots ``(n, 2**dim)`` and interpolation weights for points in ``[0, 1]**dim``."""
    coords = np.clip(coords, 0.0, 1.0)
    pos = coords * level.resolution
    base = np.minimum(np.floor(pos).astype(np.int64), level.resolution - 1)
    frac = pos - base
    bits = _CORNER_BITS[level.dim]
    corners = base[:, None, :] + bits[None, :, :]
    # product over axes of (frac if bit else 1 - frac)
    w = np.where(bits[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]).prod(axis=-1)
    return _index(level, corners), w


@dataclass
class HybridGrid:
    config: GridConfig
    grid_3d: list[BinaryTensor]
    planes: dict[str, list[BinaryTensor]] = field(default_factory=dict)

    @classmethod
    def create(cls, config: GridConfig, rng: np.random.Generator, init_scale: float = 1e-4, dtype=np.float32):
        f = config.feature_dim
        g3 = [
            BinaryTensor.uniform(f"grid3d.{i}", (lv.entries, f), rng, init_scale, dtype)
            for i, lv in enumerate(config.levels_3d)
        ]
        planes = {
            p: [
                BinaryTensor.uniform(f"plane_{p}.{i}", (lv.entries, f), rng, init_scale, dtype)
                for i, lv in enumerate(config.levels_2d)
            ]
            for p in PLANES
        }
        return cls(config, g3, planes)

    def tensors(self) -> list[BinaryTensor]:
        """All grid tensors in serialization order: 3D levels, then xy, xz, yz levels."""
        out = list(self.grid_3d)
        for p in PLANES:
            out.extend(self.planes[p])
        return out

    def level_configs(self) -> list[GridLevelConfig]:
        return list(self.config.levels_3d) + list(self.config.levels_2d) * 3


def _level_forward(lv: GridLevelConfig, t: BinaryTensor, x: np.ndarray, axes: tuple[int, ...], out: np.ndarray, col: int) -> None:
    if lv.dim == 3:
        _kernels.forward_3d(x, lv.resolution, lv.table_size, lv.is_dense, t.latent, out, col)
    else:
        _kernels.forward_2d(x, axes[0], axes[1], lv.resolution, lv.table_size, lv.is_dense, t.latent, out, col)


def _level_backward(lv: GridLevelConfig, t: BinaryTensor, x: np.ndarray, axes: tuple[int, ...], up: np.ndarray, col: int) -> None:
    if lv.dim == 3:
        _kernels.backward_3d(x, lv.resolution, lv.table_size, lv.is_dense, t.latent, up, col, t.grads, STE_BOUND)
    else:
        _kernels.backward_2d(
            x, axes[0], axes[1], lv.resolution, lv.table_size, lv.is_dense, t.latent, up, col, t.grads, STE_BOUND
        )


def encode_3d(grid: HybridGrid, x: np.ndarray) -> np.ndarray:
    """Concatenated tri-linear features of all 3D levels, shape ``(n, L * F)``."""
    x = np.ascontiguousarray(np.atleast_2d(x))
    f = grid.config.feature_dim
    out = np.zeros((x.shape[0], len(grid.grid_3d) * f), dtype=_feature_dtype(grid))
    for i, (lv, t) in enumerate(zip(grid.config.levels_3d, grid.grid_3d)):
        _level_forward(lv, t, x, (0, 1, 2), out, i * f)
    return out


def encode_2d(grid: HybridGrid, x: np.ndarray) -> tuple[np.ndarray, ...]:
    """Bi-linear plane features ``(f_xy, f_xz, f_yz)``, each ``(n, M * F)``."""
    x = np.ascontiguousarray(np.atleast_2d(x))
    f = grid.config.feature_dim
    outs = []
    for p in PLANES:
        out = np.zeros((x.shape[0], len(grid.planes[p]) * f), dtype=_feature_dtype(grid))
        for i, (lv, t) in enumerate(zip(grid.config.levels_2d, grid.planes[p])):
            _level_forward(lv, t, x, PLANE_AXES[p], out, i * f)
        outs.append(out)
    return tuple(outs)


def _feature_dtype(grid: HybridGrid):
    tensors = grid.tensors()
    return tensors[0].latent.dtype if tensors else np.float32


def encode(grid: HybridGrid, x: np.ndarray) -> np.ndarray:
    """Full hybrid feature ``[f_xyz, f_xy, f_xz, f_yz]``, width ``(L + 3M) * F``."""
    return np.concatenate((encode_3d(grid, x),) + encode_2d(grid, x), axis=-1)


def encode_backward(grid: HybridGrid, x: np.ndarray, upstream: np.ndarray) -> None:
    """Accumulate d loss / d latent for the full hybrid feature gradient ``upstream``.

    Each touched slot receives ``weight * upstream`` where ``|latent| <= 1``;
    slots outside the pass-band get nothing.
    """
    x = np.ascontiguousarray(np.atleast_2d(x))
    up = np.ascontiguousarray(np.atleast_2d(upstream), dtype=np.float64)
    if up.shape != (x.shape[0], grid.config.feature_width):
        raise ConfigError(f"upstream shape {up.shape} != ({x.shape[0]}, {grid.config.feature_width})")
    f = grid.config.feature_dim
    col = 0
    jobs = [(lv, t, (0, 1, 2)) for lv, t in zip(grid.config.levels_3d, grid.grid_3d)]
    for p in PLANES:
        jobs += [(lv, t, PLANE_AXES[p]) for lv, t in zip(grid.config.levels_2d, grid.planes[p])]
    for lv, t, axes in jobs:
        _level_backward(lv, t, x, axes, up, col)
        col += f


def encode_reference(grid: HybridGrid, x: np.ndarray) -> np.ndarray:
    """Pure-numpy twin of :func:`encode` (explicit lookups and einsum blending)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    feats = []
    for lv, t in zip(grid.config.levels_3d, grid.grid_3d):
        feats.append(_interp_reference(lv, t, x))
    for p in PLANES:
        for lv, t in zip(grid.config.levels_2d, grid.planes[p]):
            feats.append(_interp_reference(lv, t, x[:, PLANE_AXES[p]]))
    return np.concatenate(feats, axis=-1)


def _interp_reference(lv: GridLevelConfig, t: BinaryTensor, coords: np.ndarray) -> np.ndarray:
    idx, w = level_lookup(lv, coords)
    signs = np.where(t.latent[idx] >= 0, 1.0, -1.0)
    return np.einsum("nc,ncf->nf", w, signs)


def encode_backward_reference(grid: HybridGrid, x: np.ndarray, upstream: np.ndarray) -> list[np.ndarray]:
    """Latent gradients from explicit lookups; returned per tensor, nothing accumulated."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    f = grid.config.feature_dim
    jobs = [(lv, t, x) for lv, t in zip(grid.config.levels_3d, grid.grid_3d)]
    for p in PLANES:
        jobs += [(lv, t, x[:, PLANE_AXES[p]]) for lv, t in zip(grid.config.levels_2d, grid.planes[p])]
    grads = []
    for k, (lv, t, coords) in enumerate(jobs):
        idx, w = level_lookup(lv, coords)
        up = upstream[:, k * f : (k + 1) * f]
        entries = t.shape[0]
        flat = (idx[:, :, None] * f + np.arange(f)[None, None, :]).reshape(-1)
        contrib = (w[:, :, None] * up[:, None, :]).reshape(-1)
        g = np.bincount(flat, weights=contrib, minlength=entries * f).reshape(entries, f)
        g[np.abs(t.latent) > STE_BOUND] = 0.0
        grads.append(g)
    return grads
