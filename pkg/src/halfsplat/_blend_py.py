"""Pure-numpy tile blending: forward compositing and its exact backward.

This is the fallback for the compiled core in ``_blend_cy``; both implement
the same per-pixel recurrence bit-for-bit within a backend:

    w   = min(0.99, (c1 + c2 * E) * exp(power))
    T' = T * (1 - w);  stop before compositing once T' < 1e-4

Packed splat layout (columns of the (M, 13) float64 array):
    0 mu_x  1 mu_y  2 conic_a  3 conic_b  4 conic_c
    5 za    6 zb    7 c1       8 c2
    9 red   10 green  11 blue  12 depth
``mode``: 0 = erf term, 1 = sign limit (plane contains the ray), 2 = plain
Gaussian (degenerate frame or reference full-Gaussian path).

Gradients per (tile, splat) pair row (12 columns):
    0 d_mu_x  1 d_mu_y  2 d_ca  3 d_cb  4 d_cc
    5 d_za    6 d_zb    7 d_c1  8 d_c2  9..11 d_rgb
"""

import numpy as np

from .kernels import INV_SQRT_PI, fast_erf

TILE = 16
TERMINATION_T = 1e-4
WEIGHT_CLAMP = 0.99


def _tile_pixels(tile_id, tiles_x, width, height):
    ty, tx = divmod(tile_id, tiles_x)
    r0, r1 = ty * TILE, min((ty + 1) * TILE, height)
    c0, c1 = tx * TILE, min((tx + 1) * TILE, width)
    ys, xs = np.mgrid[r0:r1, c0:c1]
    return r0, r1, c0, c1, (xs + 0.5).ravel(), (ys + 0.5).ravel()


def _splat_weight(packed, mode, s, px, py):
    """Per-pixel weight of one splat; identical expression forward/backward."""
    row = packed[s]
    dx = px - row[0]
    dy = py - row[1]
    power = -0.5 * (row[2] * dx * dx + row[4] * dy * dy) - row[3] * dx * dy
    g = np.exp(power)
    m = mode[s]
    if m == 0:
        e = fast_erf(row[5] * dx + row[6] * dy)
    elif m == 1:
        e = np.sign(row[5] * dx + row[6] * dy)
    else:
        e = 0.0
    w = (row[7] + row[8] * e) * g
    return dx, dy, g, e, w


def forward_tiles(packed, mode, pair_splat, tile_starts, height, width, tiles_x,
                  background, color, alpha, depth, transmittance, terminal,
                  tile_lo, tile_hi):
    """Composite tiles [tile_lo, tile_hi) into the preallocated outputs."""
    bg = background
    for tile_id in range(tile_lo, tile_hi):
        k0, k1 = tile_starts[tile_id], tile_starts[tile_id + 1]
        r0, r1, c0, c1, px, py = _tile_pixels(tile_id, tiles_x, width, height)
        npx = px.shape[0]
        t_acc = np.ones(npx)
        acc = np.zeros((npx, 3))
        dep = np.zeros(npx)
        cnt = np.zeros(npx, dtype=np.int32)
        alive = np.ones(npx, dtype=bool)
        for k in range(k0, k1):
            s = pair_splat[k]
            _, _, _, _, w = _splat_weight(packed, mode, s, px, py)
            w = np.minimum(w, WEIGHT_CLAMP)
            t_next = t_acc * (1.0 - w)
            commit = alive & (t_next >= TERMINATION_T)
            alive &= t_next >= TERMINATION_T
            wt = np.where(commit, w * t_acc, 0.0)
            acc += wt[:, None] * packed[s, 9:12][None, :]
            dep += wt * packed[s, 12]
            cnt[commit] += 1
            t_acc = np.where(commit, t_next, t_acc)
            if not alive.any():
                break
        shape = (r1 - r0, c1 - c0)
        color[r0:r1, c0:c1] = (acc + t_acc[:, None] * bg[None, :]).reshape(shape + (3,))
        alpha[r0:r1, c0:c1] = (1.0 - t_acc).reshape(shape)
        depth[r0:r1, c0:c1] = dep.reshape(shape)
        transmittance[r0:r1, c0:c1] = t_acc.reshape(shape)
        terminal[r0:r1, c0:c1] = cnt.reshape(shape)


def backward_tiles(packed, mode, pair_splat, tile_starts, height, width, tiles_x,
                   background, d_color, transmittance, terminal, pair_grads,
                   tile_lo, tile_hi):
    """Exact gradients of sum(d_color * color) w.r.t. packed splat columns.

    Walks each pixel's composited prefix back-to-front, recovering the
    transmittance before each splat by division (the 0.99 weight clamp keeps
    1 - w away from zero).  Results accumulate into the per-pair rows of
    ``pair_grads``; tiles own disjoint rows so chunks may run concurrently.
    """
    for tile_id in range(tile_lo, tile_hi):
        k0, k1 = tile_starts[tile_id], tile_starts[tile_id + 1]
        if k0 == k1:
            continue
        r0, r1, c0, c1, px, py = _tile_pixels(tile_id, tiles_x, width, height)
        npx = px.shape[0]
        cnt = terminal[r0:r1, c0:c1].ravel()
        if not cnt.any():
            continue
        t_run = transmittance[r0:r1, c0:c1].ravel().copy()
        dc = d_color[r0:r1, c0:c1].reshape(npx, 3)
        suffix = t_run[:, None] * background[None, :]
        for k in range(k1 - 1, k0 - 1, -1):
            pos = k - k0
            act = pos < cnt
            if not act.any():
                continue
            s = pair_splat[k]
            dx, dy, g, e, w_raw = _splat_weight(packed, mode, s, px, py)
            w = np.minimum(w_raw, WEIGHT_CLAMP)
            one_minus = 1.0 - w
            t_prev = np.where(act, t_run / one_minus, t_run)
            rgb = packed[s, 9:12]
            wt = np.where(act, w * t_prev, 0.0)
            d_w = np.where(
                act & (w_raw <= WEIGHT_CLAMP),
                (dc * (t_prev[:, None] * rgb[None, :] - suffix / one_minus[:, None])).sum(axis=1),
                0.0,
            )
            row = pair_grads[k]
            c1c, c2c = packed[s, 7], packed[s, 8]
            d_g = d_w * (c1c + c2c * e)
            d_pow = d_g * g
            row[2] = np.sum(d_pow * (-0.5) * dx * dx)
            row[3] = np.sum(d_pow * (-dx * dy))
            row[4] = np.sum(d_pow * (-0.5) * dy * dy)
            row[7] = np.sum(d_w * g)
            row[8] = np.sum(d_w * e * g)
            ddx = d_pow * (-(packed[s, 2] * dx + packed[s, 3] * dy))
            ddy = d_pow * (-(packed[s, 4] * dy + packed[s, 3] * dx))
            if mode[s] == 0:
                z = packed[s, 5] * dx + packed[s, 6] * dy
                d_e = d_w * c2c * g
                d_z = d_e * (2.0 * INV_SQRT_PI) * np.exp(-z * z)
                row[5] = np.sum(d_z * dx)
                row[6] = np.sum(d_z * dy)
                ddx = ddx + d_z * packed[s, 5]
                ddy = ddy + d_z * packed[s, 6]
            row[0] = -np.sum(ddx)
            row[1] = -np.sum(ddy)
            row[9:12] = (dc * wt[:, None]).sum(axis=0)
            suffix = suffix + wt[:, None] * rgb[None, :]
            t_run = t_prev
