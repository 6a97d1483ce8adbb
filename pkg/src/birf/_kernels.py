"""Compiled per-level grid kernels (forward interpolation and STE scatter).

All loops run sequentially over points, so accumulation order and hence
results are bit-reproducible.
"""

import numpy as np
from numba import njit

_P1 = np.uint64(2654435761)
_P2 = np.uint64(805459861)


@njit(cache=True, inline="always")
def _cell(v, res):
    v = min(max(v, 0.0), 1.0) * res
    b = min(np.int64(v), res - 1)
    return b, v - b


@njit(cache=True, inline="always")
def _slot3(cx, cy, cz, stride, dense, mask):
    if dense:
        return cx + stride * (cy + stride * cz)
    return np.int64((np.uint64(cx) ^ (np.uint64(cy) * _P1) ^ (np.uint64(cz) * _P2)) & mask)


@njit(cache=True, inline="always")
def _slot2(cx, cy, stride, dense, mask):
    if dense:
        return cx + stride * cy
    return np.int64((np.uint64(cx) ^ (np.uint64(cy) * _P1)) & mask)


@njit(cache=True)
def forward_3d(x, res, table_size, dense, latent, out, col):
    """Write the tri-linear sign features of one level into ``out[:, col:col+F]``."""
    nf = latent.shape[1]
    stride = np.int64(res + 1)
    mask = np.uint64(table_size - 1)
    acc = np.empty(nf, dtype=np.float64)
    for p in range(x.shape[0]):
        bx, fx = _cell(np.float64(x[p, 0]), res)
        by, fy = _cell(np.float64(x[p, 1]), res)
        bz, fz = _cell(np.float64(x[p, 2]), res)
        acc[:] = 0.0
        for corner in range(8):
            ox = corner & 1
            oy = (corner >> 1) & 1
            oz = (corner >> 2) & 1
            w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
            idx = _slot3(bx + ox, by + oy, bz + oz, stride, dense, mask)
            for f in range(nf):
                if latent[idx, f] >= 0:
                    acc[f] += w
                else:
                    acc[f] -= w
        for f in range(nf):
            out[p, col + f] = acc[f]


@njit(cache=True)
def backward_3d(x, res, table_size, dense, latent, upstream, col, grads, bound):
    """Scatter ``weight * upstream`` onto slots whose latent lies in ``[-bound, bound]``."""
    nf = latent.shape[1]
    stride = np.int64(res + 1)
    mask = np.uint64(table_size - 1)
    for p in range(x.shape[0]):
        bx, fx = _cell(np.float64(x[p, 0]), res)
        by, fy = _cell(np.float64(x[p, 1]), res)
        bz, fz = _cell(np.float64(x[p, 2]), res)
        for corner in range(8):
            ox = corner & 1
            oy = (corner >> 1) & 1
            oz = (corner >> 2) & 1
            w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
            idx = _slot3(bx + ox, by + oy, bz + oz, stride, dense, mask)
            for f in range(nf):
                if abs(latent[idx, f]) <= bound:
                    grads[idx, f] += w * upstream[p, col + f]


@njit(cache=True)
def forward_2d(x, a0, a1, res, table_size, dense, latent, out, col):
    """Bi-linear counterpart of :func:`forward_3d` on the projection ``(x[a0], x[a1])``."""
    nf = latent.shape[1]
    stride = np.int64(res + 1)
    mask = np.uint64(table_size - 1)
    acc = np.empty(nf, dtype=np.float64)
    for p in range(x.shape[0]):
        bx, fx = _cell(np.float64(x[p, a0]), res)
        by, fy = _cell(np.float64(x[p, a1]), res)
        acc[:] = 0.0
        for corner in range(4):
            ox = corner & 1
            oy = (corner >> 1) & 1
            w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy)
            idx = _slot2(bx + ox, by + oy, stride, dense, mask)
            for f in range(nf):
                if latent[idx, f] >= 0:
                    acc[f] += w
                else:
                    acc[f] -= w
        for f in range(nf):
            out[p, col + f] = acc[f]


@njit(cache=True)
def backward_2d(x, a0, a1, res, table_size, dense, latent, upstream, col, grads, bound):
    nf = latent.shape[1]
    stride = np.int64(res + 1)
    mask = np.uint64(table_size - 1)
    for p in range(x.shape[0]):
        bx, fx = _cell(np.float64(x[p, a0]), res)
        by, fy = _cell(np.float64(x[p, a1]), res)
        for corner in range(4):
            ox = corner & 1
            oy = (corner >> 1) & 1
            w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy)
            idx = _slot2(bx + ox, by + oy, stride, dense, mask)
            for f in range(nf):
                if abs(latent[idx, f]) <= bound:
                    grads[idx, f] += w * upstream[p, col + f]
