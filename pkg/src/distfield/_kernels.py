"""Compiled inner loops for volume rendering (numba).

These mirror the pure-numpy implementation in :mod:`distfield.field`
exactly up to floating-point reassociation; the numpy path remains the
readable reference and the fallback when numba is unavailable.  The
backward kernel runs serially so gradient scatters stay deterministic.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit, prange
    AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    AVAILABLE = False

    def njit(*args, **kwargs):
        def deco(f):
            return f
        return deco

    prange = range


@njit(cache=True, inline="always")
def _cell(px, py, pz, lox, loy, loz, hix, hiy, hiz, nx, ny, nz):
    """Clamped cell index and fractional offsets for one point."""
    gx = (px - lox) / (hix - lox) * (nx - 1.0)
    gy = (py - loy) / (hiy - loy) * (ny - 1.0)
    gz = (pz - loz) / (hiz - loz) * (nz - 1.0)
    if gx < 0.0:
        gx = 0.0
    elif gx > nx - 1.0:
        gx = nx - 1.0
    if gy < 0.0:
        gy = 0.0
    elif gy > ny - 1.0:
        gy = ny - 1.0
    if gz < 0.0:
        gz = 0.0
    elif gz > nz - 1.0:
        gz = nz - 1.0
    ix = min(int(gx), nx - 2)
    iy = min(int(gy), ny - 2)
    iz = min(int(gz), nz - 2)
    return ix, iy, iz, gx - ix, gy - iy, gz - iz


@njit(cache=True, parallel=True)
def forward(params, nx, ny, nz, lo, hi, origins, dirs, ts, dt, eps,
            rgb, depth, acc, sig_cache, rgb_cache):
    n_cells = nx * ny * nz
    B, K = ts.shape
    for b in prange(B):
        ox, oy, oz = origins[b, 0], origins[b, 1], origins[b, 2]
        dx, dy, dz = dirs[b, 0], dirs[b, 1], dirs[b, 2]
        trans = 1.0
        r = g = bl = 0.0
        a_sum = 0.0
        t_sum = 0.0
        for k in range(K):
            t = ts[b, k]
            px = ox + t * dx
            py = oy + t * dy
            pz = oz + t * dz
            sig = 0.0
            cr = cg = cb = 0.0
            if (lo[0] <= px <= hi[0] and lo[1] <= py <= hi[1]
                    and lo[2] <= pz <= hi[2]):
                ix, iy, iz, fx, fy, fz = _cell(px, py, pz, lo[0], lo[1], lo[2],
                                               hi[0], hi[1], hi[2], nx, ny, nz)
                for cx in range(2):
                    wx = fx if cx == 1 else 1.0 - fx
                    for cy in range(2):
                        wy = fy if cy == 1 else 1.0 - fy
                        for cz in range(2):
                            wz = fz if cz == 1 else 1.0 - fz
                            w8 = wx * wy * wz
                            idx = ((ix + cx) * ny + (iy + cy)) * nz + (iz + cz)
                            sig += w8 * params[idx]
                            base = n_cells + 3 * idx
                            cr += w8 * params[base]
                            cg += w8 * params[base + 1]
                            cb += w8 * params[base + 2]
            sig_cache[b, k] = sig
            rgb_cache[b, k, 0] = cr
            rgb_cache[b, k, 1] = cg
            rgb_cache[b, k, 2] = cb
            tau = sig * dt
            alpha = -math.expm1(-tau)
            w = alpha * trans
            r += w * cr
            g += w * cg
            bl += w * cb
            a_sum += w
            t_sum += w * t
            trans *= math.exp(-tau)
        rgb[b, 0] = r
        rgb[b, 1] = g
        rgb[b, 2] = bl
        acc[b] = a_sum
        d_acc = a_sum if a_sum > eps else eps
        depth[b] = t_sum / d_acc


@njit(cache=True)
def backward(params, nx, ny, nz, lo, hi, origins, dirs, ts, dt, eps,
             sig_cache, rgb_cache, g_rgb, g_depth, g_acc, grad):
    n_cells = nx * ny * nz
    B, K = ts.shape
    wbuf = np.empty(K)
    tabuf = np.empty(K)  # transmittance after sample k
    for b in range(B):
        trans = 1.0
        a_sum = 0.0
        t_sum = 0.0
        for k in range(K):
            tau = sig_cache[b, k] * dt
            alpha = -math.expm1(-tau)
            w = alpha * trans
            wbuf[k] = w
            trans *= math.exp(-tau)
            tabuf[k] = trans
            a_sum += w
            t_sum += w * ts[b, k]

        denom = a_sum if a_sum > eps else eps
        d_tsum = g_depth[b] / denom
        if a_sum >= eps:
            d_acc = -g_depth[b] * t_sum / (denom * denom) + g_acc[b]
        else:
            d_acc = g_acc[b]

        ox, oy, oz = origins[b, 0], origins[b, 1], origins[b, 2]
        dx, dy, dz = dirs[b, 0], dirs[b, 1], dirs[b, 2]
        suffix = 0.0
        for k in range(K - 1, -1, -1):
            d_w = (g_rgb[b, 0] * rgb_cache[b, k, 0]
                   + g_rgb[b, 1] * rgb_cache[b, k, 1]
                   + g_rgb[b, 2] * rgb_cache[b, k, 2]
                   + d_tsum * ts[b, k] + d_acc)
            d_tau = d_w * tabuf[k] - suffix
            suffix += d_w * wbuf[k]

            t = ts[b, k]
            px = ox + t * dx
            py = oy + t * dy
            pz = oz + t * dz
            if not (lo[0] <= px <= hi[0] and lo[1] <= py <= hi[1]
                    and lo[2] <= pz <= hi[2]):
                continue
            d_sig = d_tau * dt
            w_k = wbuf[k]
            gr = g_rgb[b, 0] * w_k
            gg = g_rgb[b, 1] * w_k
            gb = g_rgb[b, 2] * w_k
            ix, iy, iz, fx, fy, fz = _cell(px, py, pz, lo[0], lo[1], lo[2],
                                           hi[0], hi[1], hi[2], nx, ny, nz)
            for cx in range(2):
                wx = fx if cx == 1 else 1.0 - fx
                for cy in range(2):
                    wy = fy if cy == 1 else 1.0 - fy
                    for cz in range(2):
                        wz = fz if cz == 1 else 1.0 - fz
                        w8 = wx * wy * wz
                        idx = ((ix + cx) * ny + (iy + cy)) * nz + (iz + cz)
                        grad[idx] += w8 * d_sig
                        base = n_cells + 3 * idx
                        grad[base] += w8 * gr
                        grad[base + 1] += w8 * gg
                        grad[base + 2] += w8 * gb
