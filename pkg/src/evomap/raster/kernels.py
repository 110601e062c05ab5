"""Numba kernels for tiled forward rasterization and the analytic backward.

Splats arrive pre-projected and depth-sorted (front to back, ties broken by
id). Tile lists are CSR-style: `entries[offsets[t]:offsets[t+1]]` are indices
into the sorted splat arrays, already in blending order because tiles are
filled by one pass over the sorted splats.

Everything here is sequential by design: per-pixel outputs are disjoint and
gradient accumulation happens tile by tile in a fixed order, which keeps
end-to-end runs bit-for-bit reproducible.

Blending semantics (shared with the brute-force oracle):
  sigma  = 0.5 * d^T conic d, contribution truncated at sigma > SIGMA_CUTOFF
  alpha  = min(opacity * exp(-sigma), 0.99)
  weight = alpha * prod_{front}(1 - alpha_k)
The tiled path may stop once transmittance drops below `cutoff`; the oracle
never does.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from ..geometry import SIGMA_CUTOFF

TILE = 16
ALPHA_MAX = 0.99


@njit(cache=True)
def build_tile_lists(mean2d, radius, width, height):
    """CSR tile lists from splat screen bounds. Returns (offsets, entries)."""
    n = mean2d.shape[0]
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    n_tiles = tiles_x * tiles_y

    spans = np.empty((n, 4), dtype=np.int64)
    counts = np.zeros(n_tiles, dtype=np.int64)
    for i in range(n):
        r = radius[i]
        x0 = int(np.floor((mean2d[i, 0] - r) / TILE))
        x1 = int(np.floor((mean2d[i, 0] + r) / TILE))
        y0 = int(np.floor((mean2d[i, 1] - r) / TILE))
        y1 = int(np.floor((mean2d[i, 1] + r) / TILE))
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, tiles_x - 1)
        y1 = min(y1, tiles_y - 1)
        spans[i, 0] = x0
        spans[i, 1] = x1
        spans[i, 2] = y0
        spans[i, 3] = y1
        if x1 >= x0 and y1 >= y0:
            for ty in range(y0, y1 + 1):
                for tx in range(x0, x1 + 1):
                    counts[ty * tiles_x + tx] += 1

    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    for t in range(n_tiles):
        offsets[t + 1] = offsets[t] + counts[t]
    entries = np.empty(offsets[n_tiles], dtype=np.int64)
    cursor = offsets[:-1].copy()
    for i in range(n):
        x0, x1, y0, y1 = spans[i, 0], spans[i, 1], spans[i, 2], spans[i, 3]
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                t = ty * tiles_x + tx
                entries[cursor[t]] = i
                cursor[t] += 1
    return offsets, entries


@njit(cache=True)
def forward_kernel(mean2d, conic, depth, opacity, color, offsets, entries,
                   width, height, background, far, cutoff, normalize_depth,
                   depth_floor, out_color, out_depth, out_alpha,
                   keep_contrib, contrib_idx, contrib_w, contrib_n):
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    cap = contrib_idx.shape[2]

    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            lo, hi = offsets[t], offsets[t + 1]
            py0 = ty * TILE
            px0 = tx * TILE
            for py in range(py0, min(py0 + TILE, height)):
                for px in range(px0, min(px0 + TILE, width)):
                    trans = 1.0
                    wsum = 0.0
                    dsum = 0.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    ncon = 0
                    for e in range(lo, hi):
                        g = entries[e]
                        dx = px - mean2d[g, 0]
                        dy = py - mean2d[g, 1]
                        sigma = 0.5 * (conic[g, 0] * dx * dx
                                       + conic[g, 2] * dy * dy) \
                            + conic[g, 1] * dx * dy
                        if sigma > SIGMA_CUTOFF or sigma < 0.0:
                            continue
                        alpha = opacity[g] * np.exp(-sigma)
                        if alpha > ALPHA_MAX:
                            alpha = ALPHA_MAX
                        w = alpha * trans
                        c0 += w * color[g, 0]
                        c1 += w * color[g, 1]
                        c2 += w * color[g, 2]
                        dsum += w * depth[g]
                        wsum += w
                        if keep_contrib and ncon < cap:
                            contrib_idx[py, px, ncon] = g
                            contrib_w[py, px, ncon] = w
                            ncon += 1
                        trans *= 1.0 - alpha
                        if trans < cutoff:
                            break
                    out_color[py, px, 0] = c0 + background[0] * trans
                    out_color[py, px, 1] = c1 + background[1] * trans
                    out_color[py, px, 2] = c2 + background[2] * trans
                    out_alpha[py, px] = wsum
                    if normalize_depth:
                        if wsum > depth_floor:
                            out_depth[py, px] = dsum / wsum
                        else:
                            out_depth[py, px] = far
                    else:
                        out_depth[py, px] = dsum + far * trans
                    if keep_contrib:
                        contrib_n[py, px] = ncon


@njit(cache=True)
def backward_kernel(mean2d, conic, depth, opacity, color, offsets, entries,
                    width, height, background, far, cutoff, normalize_depth,
                    depth_floor, d_color, d_depth, pixel_mask,
                    g_mean2d, g_conic, g_depth, g_opacity, g_color):
    """Replay blending per pixel and accumulate screen-space gradients.

    Gradients land in per-splat arrays aligned with the sorted splat order:
    g_mean2d (M,2), g_conic (M,3) for the packed inverse covariance [a,b,c],
    g_depth (M,), g_opacity (M,) w.r.t. the activated opacity, g_color (M,3)
    w.r.t. the blended color.
    """
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE

    max_len = 0
    for t in range(tiles_x * tiles_y):
        ln = offsets[t + 1] - offsets[t]
        if ln > max_len:
            max_len = ln

    slot = np.empty(max_len, dtype=np.int64)
    a_buf = np.empty(max_len)
    w_buf = np.empty(max_len)
    t_buf = np.empty(max_len)
    dx_buf = np.empty(max_len)
    dy_buf = np.empty(max_len)
    clamped = np.empty(max_len, dtype=np.uint8)

    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            lo, hi = offsets[t], offsets[t + 1]
            if hi == lo:
                continue
            py0 = ty * TILE
            px0 = tx * TILE
            for py in range(py0, min(py0 + TILE, height)):
                for px in range(px0, min(px0 + TILE, width)):
                    if pixel_mask[py, px] == 0:
                        continue
                    gc0 = d_color[py, px, 0]
                    gc1 = d_color[py, px, 1]
                    gc2 = d_color[py, px, 2]
                    gd = d_depth[py, px]
                    if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0:
                        continue

                    # Replay the forward pass at this pixel.
                    trans = 1.0
                    wsum = 0.0
                    dsum = 0.0
                    m = 0
                    for e in range(lo, hi):
                        g = entries[e]
                        dx = px - mean2d[g, 0]
                        dy = py - mean2d[g, 1]
                        sigma = 0.5 * (conic[g, 0] * dx * dx
                                       + conic[g, 2] * dy * dy) \
                            + conic[g, 1] * dx * dy
                        if sigma > SIGMA_CUTOFF or sigma < 0.0:
                            continue
                        alpha_raw = opacity[g] * np.exp(-sigma)
                        alpha = alpha_raw
                        if alpha > ALPHA_MAX:
                            alpha = ALPHA_MAX
                        slot[m] = g
                        a_buf[m] = alpha
                        t_buf[m] = trans
                        w_buf[m] = alpha * trans
                        dx_buf[m] = dx
                        dy_buf[m] = dy
                        clamped[m] = 1 if alpha_raw > ALPHA_MAX else 0
                        wsum += w_buf[m]
                        dsum += w_buf[m] * depth[g]
                        m += 1
                        trans *= 1.0 - alpha
                        if trans < cutoff:
                            break
                    if m == 0:
                        continue

                    use_depth = gd != 0.0
                    dn = 0.0
                    if normalize_depth:
                        if wsum > depth_floor:
                            dn = dsum / wsum
                        else:
                            use_depth = False

                    # Suffix accumulators: sums over splats behind j.
                    suf_c0 = background[0] * trans
                    suf_c1 = background[1] * trans
                    suf_c2 = background[2] * trans
                    suf_w = 0.0
                    if normalize_depth:
                        suf_d = 0.0
                    else:
                        suf_d = far * trans
                    for k in range(m - 1, -1, -1):
                        g = slot[k]
                        alpha = a_buf[k]
                        w = w_buf[k]
                        tj = t_buf[k]
                        inv1a = 1.0 / (1.0 - alpha)

                        g_color[g, 0] += gc0 * w
                        g_color[g, 1] += gc1 * w
                        g_color[g, 2] += gc2 * w

                        galpha = (gc0 * (color[g, 0] * tj - suf_c0 * inv1a)
                                  + gc1 * (color[g, 1] * tj - suf_c1 * inv1a)
                                  + gc2 * (color[g, 2] * tj - suf_c2 * inv1a))
                        if use_depth:
                            if normalize_depth:
                                g_depth[g] += gd * w / wsum
                                galpha += gd * (
                                    (depth[g] * tj - suf_d * inv1a)
                                    - dn * (tj - suf_w * inv1a)) / wsum
                            else:
                                g_depth[g] += gd * w
                                galpha += gd * (depth[g] * tj - suf_d * inv1a)

                        suf_c0 += color[g, 0] * w
                        suf_c1 += color[g, 1] * w
                        suf_c2 += color[g, 2] * w
                        suf_d += depth[g] * w
                        suf_w += w

                        if clamped[k] == 1:
                            continue
                        # alpha = opacity * exp(-sigma)
                        g_opacity[g] += galpha * alpha / opacity[g]
                        gsigma = -galpha * alpha
                        dx = dx_buf[k]
                        dy = dy_buf[k]
                        qx = conic[g, 0] * dx + conic[g, 1] * dy
                        qy = conic[g, 1] * dx + conic[g, 2] * dy
                        g_mean2d[g, 0] += -gsigma * qx
                        g_mean2d[g, 1] += -gsigma * qy
                        g_conic[g, 0] += gsigma * 0.5 * dx * dx
                        g_conic[g, 1] += gsigma * dx * dy
                        g_conic[g, 2] += gsigma * 0.5 * dy * dy
