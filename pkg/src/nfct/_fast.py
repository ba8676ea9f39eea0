"""Numba kernels for the hash-encoder hot path.

Importing this module is optional: :mod:`nfct.field` falls back to the pure
numpy implementation when numba is unavailable or disabled via the
``NFCT_DISABLE_FAST`` environment variable.  The kernels reproduce the numpy
reference semantics, including determinism: table-gradient scatter runs over
a fixed number of point chunks, each owning its own accumulation buffer, and
the buffers are reduced in chunk order, so results do not depend on thread
scheduling.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

HASH_PRIME_Y = np.uint64(2654435761)

# Fixed chunk count for gradient scatter; independent of the thread count so
# accumulation order (and hence floating-point rounding) is reproducible.
N_SCATTER_CHUNKS = 16


@njit(parallel=True, cache=True)
def hash_forward_kernel(pts, tables, level_rows, resolutions, dense_n, hash_mask,
                        out, corners, fracs):
    B = pts.shape[0]
    L = resolutions.shape[0]
    F = tables.shape[1]
    for i in prange(B):
        ux = (pts[i, 0] + 1.0) * 0.5
        if ux < 0.0:
            ux = 0.0
        elif ux > 1.0:
            ux = 1.0
        uy = (pts[i, 1] + 1.0) * 0.5
        if uy < 0.0:
            uy = 0.0
        elif uy > 1.0:
            uy = 1.0
        for l in range(L):
            res = resolutions[l]
            x = ux * res
            y = uy * res
            ix = int(x)
            iy = int(y)
            if ix > res - 1:
                ix = res - 1
            if iy > res - 1:
                iy = res - 1
            wx = x - ix
            wy = y - iy
            base = level_rows[l]
            if dense_n[l] > 0:
                n = dense_n[l]
                i00 = base + iy * n + ix
                i10 = i00 + 1
                i01 = i00 + n
                i11 = i01 + 1
            else:
                m = hash_mask[l]
                yk = np.uint64(iy) * HASH_PRIME_Y
                yk1 = np.uint64(iy + 1) * HASH_PRIME_Y
                i00 = base + np.int64((np.uint64(ix) ^ yk) & m)
                i10 = base + np.int64((np.uint64(ix + 1) ^ yk) & m)
                i01 = base + np.int64((np.uint64(ix) ^ yk1) & m)
                i11 = base + np.int64((np.uint64(ix + 1) ^ yk1) & m)
            corners[i, l, 0] = i00
            corners[i, l, 1] = i10
            corners[i, l, 2] = i01
            corners[i, l, 3] = i11
            fracs[i, l, 0] = wx
            fracs[i, l, 1] = wy
            w00 = (1.0 - wx) * (1.0 - wy)
            w10 = wx * (1.0 - wy)
            w01 = (1.0 - wx) * wy
            w11 = wx * wy
            col = l * F
            for f in range(F):
                out[i, col + f] = (
                    tables[i00, f] * w00
                    + tables[i10, f] * w10
                    + tables[i01, f] * w01
                    + tables[i11, f] * w11
                )


@njit(parallel=True, cache=True)
def hash_backward_kernel(dfeat, corners, fracs, tables, pts, resolutions,
                         grad_chunks, dpts, need_coords):
    B = dfeat.shape[0]
    L = resolutions.shape[0]
    F = tables.shape[1]
    C = grad_chunks.shape[0]
    chunk = (B + C - 1) // C
    for c in prange(C):
        lo = c * chunk
        hi = min(lo + chunk, B)
        for i in range(lo, hi):
            gpx = 0.0
            gpy = 0.0
            for l in range(L):
                i00 = corners[i, l, 0]
                i10 = corners[i, l, 1]
                i01 = corners[i, l, 2]
                i11 = corners[i, l, 3]
                wx = fracs[i, l, 0]
                wy = fracs[i, l, 1]
                w00 = (1.0 - wx) * (1.0 - wy)
                w10 = wx * (1.0 - wy)
                w01 = (1.0 - wx) * wy
                w11 = wx * wy
                col = l * F
                gx = 0.0
                gy = 0.0
                for f in range(F):
                    df = dfeat[i, col + f]
                    grad_chunks[c, i00, f] += df * w00
                    grad_chunks[c, i10, f] += df * w10
                    grad_chunks[c, i01, f] += df * w01
                    grad_chunks[c, i11, f] += df * w11
                    if need_coords:
                        f00 = tables[i00, f]
                        f10 = tables[i10, f]
                        f01 = tables[i01, f]
                        f11 = tables[i11, f]
                        gx += ((f10 - f00) * (1.0 - wy) + (f11 - f01) * wy) * df
                        gy += ((f01 - f00) * (1.0 - wx) + (f11 - f10) * wx) * df
                if need_coords:
                    half_res = 0.5 * resolutions[l]
                    gpx += gx * half_res
                    gpy += gy * half_res
            if need_coords:
                if pts[i, 0] <= -1.0 or pts[i, 0] >= 1.0:
                    gpx = 0.0
                if pts[i, 1] <= -1.0 or pts[i, 1] >= 1.0:
                    gpy = 0.0
                dpts[i, 0] = gpx
                dpts[i, 1] = gpy


@njit(parallel=True, cache=True)
def relu_backward_kernel(d, out):
    """In place: d *= (out > 0)."""
    n = d.shape[0]
    w = d.shape[1]
    for i in prange(n):
        for j in range(w):
            if out[i, j] <= 0.0:
                d[i, j] = 0.0


class FastHashTables:
    """Per-encoder constants shared by the kernels."""

    def __init__(self, cfg):
        self.resolutions = np.array(cfg.resolutions, dtype=np.int64)
        rows = []
        off = 0
        dense_n = []
        mask = []
        for lvl in range(cfg.n_levels):
            rows.append(off)
            entries = cfg.level_table_entries(lvl)
            off += entries
            if cfg.level_is_dense(lvl):
                dense_n.append(cfg.resolutions[lvl] + 1)
                mask.append(0)
            else:
                dense_n.append(0)
                mask.append(entries - 1)
        self.level_rows = np.array(rows, dtype=np.int64)
        self.dense_n = np.array(dense_n, dtype=np.int64)
        self.hash_mask = np.array(mask, dtype=np.uint64)
        self.total_entries = off
        self.features = cfg.features_per_level
        self.out_dim = cfg.out_dim
