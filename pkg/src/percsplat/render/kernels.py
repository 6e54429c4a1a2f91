"""Numba tile rasterizer: binning, forward compositing, backward pass.

Every per-primitive quantity produced inside a tile is written to a row of
a buffer indexed by the tile's entry range; rows are merged into
per-primitive totals sequentially in entry order. Results are therefore
identical for any worker count.

Pixel (row, col) samples the image plane at (col + 0.5, row + 0.5).
"""

import math

import numpy as np
from numba import njit, prange

MAHA_CUTOFF = 9.0  # (3 sigma)^2
MIN_ALPHA = 1.0 / 255.0
T_EPS = 1e-4

# per-entry gradient buffer columns
G_X, G_Y, G_CA, G_CB, G_CC, G_OPAC, G_R, G_G, G_B, G_SENS = range(10)
N_GRAD = 10


@njit(cache=True)
def bin_tiles(xy, radius, width, height, tile, exact):
    """Assign depth-sorted primitives to tiles.

    Returns (offsets, entries): tile t owns entries[offsets[t]:offsets[t+1]],
    which are primitive positions in depth order.
    """
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    m = xy.shape[0]
    rect = np.zeros((m, 4), dtype=np.int64)
    counts = np.zeros(n_tx * n_ty, dtype=np.int64)
    for i in range(m):
        if exact:
            x0, x1, y0, y1 = 0, n_tx, 0, n_ty
        else:
            r = radius[i]
            x0 = max(0, int(math.floor((xy[i, 0] - r) / tile)))
            x1 = min(n_tx, int(math.floor((xy[i, 0] + r) / tile)) + 1)
            y0 = max(0, int(math.floor((xy[i, 1] - r) / tile)))
            y1 = min(n_ty, int(math.floor((xy[i, 1] + r) / tile)) + 1)
        rect[i, 0] = x0
        rect[i, 1] = x1
        rect[i, 2] = y0
        rect[i, 3] = y1
        for ty in range(y0, y1):
            for tx in range(x0, x1):
                counts[ty * n_tx + tx] += 1
    offsets = np.zeros(n_tx * n_ty + 1, dtype=np.int64)
    for t in range(n_tx * n_ty):
        offsets[t + 1] = offsets[t] + counts[t]
    entries = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for i in range(m):
        for ty in range(rect[i, 2], rect[i, 3]):
            for tx in range(rect[i, 0], rect[i, 1]):
                t = ty * n_tx + tx
                entries[fill[t]] = i
                fill[t] += 1
    return offsets, entries


@njit(parallel=True, cache=True)
def forward(xy, conic, opac, color, sens, depth, offsets, entries,
            width, height, tile, exact, want_weights):
    n_tx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    rgb = np.zeros((height, width, 3))
    sens_out = np.zeros((height, width))
    depth_out = np.zeros((height, width))
    final_t = np.ones((height, width))
    wbuf = np.zeros(entries.shape[0])
    for t in prange(n_tiles):
        ty = t // n_tx
        tx = t % n_tx
        start = offsets[t]
        end = offsets[t + 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                fx = px + 0.5
                fy = py + 0.5
                trans = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                cs = 0.0
                cd = 0.0
                for e in range(start, end):
                    i = entries[e]
                    dx = xy[i, 0] - fx
                    dy = xy[i, 1] - fy
                    q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                    if not exact and q > MAHA_CUTOFF:
                        continue
                    g = math.exp(-0.5 * q)
                    a = opac[i] * g
                    if not exact and a < MIN_ALPHA:
                        continue
                    w = a * trans
                    cr += w * color[i, 0]
                    cg += w * color[i, 1]
                    cb += w * color[i, 2]
                    cs += w * sens[i]
                    cd += w * depth[i]
                    if want_weights:
                        wbuf[e] += w
                    trans = trans * (1.0 - a)
                    if not exact and trans < T_EPS:
                        break
                rgb[py, px, 0] = cr
                rgb[py, px, 1] = cg
                rgb[py, px, 2] = cb
                sens_out[py, px] = cs
                depth_out[py, px] = cd
                final_t[py, px] = trans
    return rgb, sens_out, depth_out, final_t, wbuf


@njit(parallel=True, cache=True)
def backward(xy, conic, opac, color, sens, offsets, entries,
             width, height, tile, exact, d_rgb, d_sens):
    """Per-entry partials of the loss w.r.t. 2D splat attributes.

    Each pixel re-runs its forward pass, records the contributing entries
    with their alpha and incoming transmittance, then walks them back to
    front with running suffix sums (no division by 1 - alpha).
    """
    n_tx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    gbuf = np.zeros((entries.shape[0], N_GRAD))
    for t in prange(n_tiles):
        ty = t // n_tx
        tx = t % n_tx
        start = offsets[t]
        end = offsets[t + 1]
        n = end - start
        c_e = np.empty(n, dtype=np.int64)
        c_a = np.empty(n)
        c_g = np.empty(n)
        c_t = np.empty(n)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                fx = px + 0.5
                fy = py + 0.5
                k = 0
                trans = 1.0
                for e in range(start, end):
                    i = entries[e]
                    dx = xy[i, 0] - fx
                    dy = xy[i, 1] - fy
                    q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
                    if not exact and q > MAHA_CUTOFF:
                        continue
                    g = math.exp(-0.5 * q)
                    a = opac[i] * g
                    if not exact and a < MIN_ALPHA:
                        continue
                    c_e[k] = e
                    c_a[k] = a
                    c_g[k] = g
                    c_t[k] = trans
                    k += 1
                    trans = trans * (1.0 - a)
                    if not exact and trans < T_EPS:
                        break
                gr = d_rgb[py, px, 0]
                gg = d_rgb[py, px, 1]
                gb = d_rgb[py, px, 2]
                gs = d_sens[py, px]
                sr = 0.0
                sg = 0.0
                sb = 0.0
                ss = 0.0
                for j in range(k - 1, -1, -1):
                    e = c_e[j]
                    i = entries[e]
                    a = c_a[j]
                    g = c_g[j]
                    ti = c_t[j]
                    w = a * ti
                    gbuf[e, G_R] += gr * w
                    gbuf[e, G_G] += gg * w
                    gbuf[e, G_B] += gb * w
                    gbuf[e, G_SENS] += gs * w
                    d_a = ti * (gr * (color[i, 0] - sr) + gg * (color[i, 1] - sg)
                                + gb * (color[i, 2] - sb) + gs * (sens[i] - ss))
                    sr = a * color[i, 0] + (1.0 - a) * sr
                    sg = a * color[i, 1] + (1.0 - a) * sg
                    sb = a * color[i, 2] + (1.0 - a) * sb
                    ss = a * sens[i] + (1.0 - a) * ss
                    gbuf[e, G_OPAC] += d_a * g
                    d_q = -0.5 * d_a * opac[i] * g
                    dx = xy[i, 0] - fx
                    dy = xy[i, 1] - fy
                    gbuf[e, G_X] += d_q * 2.0 * (conic[i, 0] * dx + conic[i, 1] * dy)
                    gbuf[e, G_Y] += d_q * 2.0 * (conic[i, 1] * dx + conic[i, 2] * dy)
                    gbuf[e, G_CA] += d_q * dx * dx
                    gbuf[e, G_CB] += d_q * 2.0 * dx * dy
                    gbuf[e, G_CC] += d_q * dy * dy
    return gbuf


@njit(cache=True)
def merge_rows(buf, entries, m):
    out = np.zeros((m, buf.shape[1]))
    for e in range(entries.shape[0]):
        i = entries[e]
        for c in range(buf.shape[1]):
            out[i, c] += buf[e, c]
    return out


@njit(cache=True)
def merge_scalar(buf, entries, m):
    out = np.zeros(m)
    for e in range(entries.shape[0]):
        out[entries[e]] += buf[e]
    return out
