# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled tile blending core; see _blend_py for the layout contract.

Semantics mirror the numpy fallback: same packed columns, same weight
clamp and termination rule, same pair-gradient rows.  Loops run splat-outer
over tile-local pixel state so each splat's parameters stay in registers;
callers hand disjoint tile ranges to worker threads (the GIL is released
inside).
"""

import numpy as np

cimport cython
from libc.math cimport exp, fabs

cdef double TERMINATION_T = 1e-4
cdef double WEIGHT_CLAMP = 0.99
cdef double INV_SQRT_PI = 0.5641895835477563
cdef int TILE = 16
cdef int TILE_PIX = 256

# piecewise polynomial erf; identical coefficients to kernels.fast_erf
cdef double[8] ERF_A
cdef double[12] ERF_B
cdef double[13] ERF_C

def _init_coeffs():
    from .kernels import _ERF_A, _ERF_B, _ERF_C
    assert len(_ERF_A) == 8 and len(_ERF_B) == 12 and len(_ERF_C) == 13
    for i, v in enumerate(_ERF_A):
        ERF_A[i] = v
    for i, v in enumerate(_ERF_B):
        ERF_B[i] = v
    for i, v in enumerate(_ERF_C):
        ERF_C[i] = v

_init_coeffs()


cdef inline double _erf(double z) noexcept nogil:
    cdef double az = fabs(z)
    cdef double acc, t
    cdef int i
    if az < 1.0:
        t = az * az
        acc = ERF_A[7]
        for i in range(6, -1, -1):
            acc = acc * t + ERF_A[i]
        acc = az * acc
    elif az < 2.4:
        t = az - 1.7
        acc = ERF_B[11]
        for i in range(10, -1, -1):
            acc = acc * t + ERF_B[i]
    elif az < 4.5:
        t = az - 3.45
        acc = ERF_C[12]
        for i in range(11, -1, -1):
            acc = acc * t + ERF_C[i]
        acc = 1.0 - acc
    else:
        acc = 1.0
    return -acc if z < 0.0 else acc


cdef inline double _sign(double x) noexcept nogil:
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


def forward_tiles(double[:, ::1] packed, signed char[::1] mode,
                  int[::1] pair_splat, long[::1] tile_starts,
                  int height, int width, int tiles_x, double[::1] background,
                  double[:, :, ::1] color, double[:, ::1] alpha,
                  double[:, ::1] depth, double[:, ::1] transmittance,
                  int[:, ::1] terminal, int tile_lo, int tile_hi):
    with nogil:
        _forward(packed, mode, pair_splat, tile_starts, height, width, tiles_x,
                 background, color, alpha, depth, transmittance, terminal,
                 tile_lo, tile_hi)


cdef void _forward(double[:, ::1] packed, signed char[::1] mode,
                   int[::1] pair_splat, long[::1] tile_starts,
                   int height, int width, int tiles_x, double[::1] background,
                   double[:, :, ::1] color, double[:, ::1] alpha,
                   double[:, ::1] depth, double[:, ::1] transmittance,
                   int[:, ::1] terminal, int tile_lo, int tile_hi) noexcept nogil:
    cdef int tile_id, ty, tx, r0, r1, c0, c1, row, col, cw, npx, p, n_alive
    cdef long k, k0, k1
    cdef int s, md
    cdef double mux, muy, ca, cb, cc, za, zb, c1w, c2w, cr_s, cg_s, cb_s, dep_s
    cdef double dx, dy, g, e, w, t_next, wt
    cdef double px[256]
    cdef double py[256]
    cdef double t_acc[256]
    cdef double acc_r[256]
    cdef double acc_g[256]
    cdef double acc_b[256]
    cdef double dep[256]
    cdef int cnt[256]
    cdef signed char alive[256]

    for tile_id in range(tile_lo, tile_hi):
        k0 = tile_starts[tile_id]
        k1 = tile_starts[tile_id + 1]
        ty = tile_id // tiles_x
        tx = tile_id - ty * tiles_x
        r0 = ty * TILE
        r1 = min(r0 + TILE, height)
        c0 = tx * TILE
        c1 = min(c0 + TILE, width)
        cw = c1 - c0
        npx = (r1 - r0) * cw
        p = 0
        for row in range(r0, r1):
            for col in range(c0, c1):
                px[p] = col + 0.5
                py[p] = row + 0.5
                t_acc[p] = 1.0
                acc_r[p] = 0.0
                acc_g[p] = 0.0
                acc_b[p] = 0.0
                dep[p] = 0.0
                cnt[p] = 0
                alive[p] = 1
                p += 1
        n_alive = npx
        for k in range(k0, k1):
            if n_alive == 0:
                break
            s = pair_splat[k]
            mux = packed[s, 0]
            muy = packed[s, 1]
            ca = packed[s, 2]
            cb = packed[s, 3]
            cc = packed[s, 4]
            za = packed[s, 5]
            zb = packed[s, 6]
            c1w = packed[s, 7]
            c2w = packed[s, 8]
            cr_s = packed[s, 9]
            cg_s = packed[s, 10]
            cb_s = packed[s, 11]
            dep_s = packed[s, 12]
            md = mode[s]
            for p in range(npx):
                if not alive[p]:
                    continue
                dx = px[p] - mux
                dy = py[p] - muy
                g = exp(-0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy)
                if md == 0:
                    e = _erf(za * dx + zb * dy)
                elif md == 1:
                    e = _sign(za * dx + zb * dy)
                else:
                    e = 0.0
                w = (c1w + c2w * e) * g
                if w > WEIGHT_CLAMP:
                    w = WEIGHT_CLAMP
                t_next = t_acc[p] * (1.0 - w)
                if t_next < TERMINATION_T:
                    alive[p] = 0
                    n_alive -= 1
                    continue
                wt = w * t_acc[p]
                acc_r[p] += wt * cr_s
                acc_g[p] += wt * cg_s
                acc_b[p] += wt * cb_s
                dep[p] += wt * dep_s
                cnt[p] += 1
                t_acc[p] = t_next
        p = 0
        for row in range(r0, r1):
            for col in range(c0, c1):
                color[row, col, 0] = acc_r[p] + t_acc[p] * background[0]
                color[row, col, 1] = acc_g[p] + t_acc[p] * background[1]
                color[row, col, 2] = acc_b[p] + t_acc[p] * background[2]
                alpha[row, col] = 1.0 - t_acc[p]
                depth[row, col] = dep[p]
                transmittance[row, col] = t_acc[p]
                terminal[row, col] = cnt[p]
                p += 1


def backward_tiles(double[:, ::1] packed, signed char[::1] mode,
                   int[::1] pair_splat, long[::1] tile_starts,
                   int height, int width, int tiles_x, double[::1] background,
                   double[:, :, ::1] d_color, double[:, ::1] transmittance,
                   int[:, ::1] terminal, double[:, ::1] pair_grads,
                   int tile_lo, int tile_hi):
    with nogil:
        _backward(packed, mode, pair_splat, tile_starts, height, width,
                  tiles_x, background, d_color, transmittance, terminal,
                  pair_grads, tile_lo, tile_hi)


cdef void _backward(double[:, ::1] packed, signed char[::1] mode,
                    int[::1] pair_splat, long[::1] tile_starts,
                    int height, int width, int tiles_x, double[::1] background,
                    double[:, :, ::1] d_color, double[:, ::1] transmittance,
                    int[:, ::1] terminal, double[:, ::1] pair_grads,
                    int tile_lo, int tile_hi) noexcept nogil:
    cdef int tile_id, ty, tx, r0, r1, c0, c1, row, col, cw, npx, p
    cdef long k, k0, k1, pos
    cdef int s, md, max_cnt
    cdef double mux, muy, ca, cb, cc, za, zb, c1w, c2w, r_s, g_s, b_s
    cdef double dx, dy, g, e, w_raw, w, one_minus, t_prev, wt, z
    cdef double d_w, d_g, d_pow, ddx, ddy, d_e, d_z
    cdef double a_mux, a_muy, a_ca, a_cb, a_cc, a_za, a_zb, a_c1, a_c2
    cdef double a_r, a_g, a_b
    cdef double px[256]
    cdef double py[256]
    cdef double t_run[256]
    cdef double sr[256]
    cdef double sg[256]
    cdef double sb[256]
    cdef double dr[256]
    cdef double dg[256]
    cdef double db[256]
    cdef int cnt[256]

    for tile_id in range(tile_lo, tile_hi):
        k0 = tile_starts[tile_id]
        k1 = tile_starts[tile_id + 1]
        if k0 == k1:
            continue
        ty = tile_id // tiles_x
        tx = tile_id - ty * tiles_x
        r0 = ty * TILE
        r1 = min(r0 + TILE, height)
        c0 = tx * TILE
        c1 = min(c0 + TILE, width)
        cw = c1 - c0
        npx = (r1 - r0) * cw
        p = 0
        max_cnt = 0
        for row in range(r0, r1):
            for col in range(c0, c1):
                px[p] = col + 0.5
                py[p] = row + 0.5
                cnt[p] = terminal[row, col]
                if cnt[p] > max_cnt:
                    max_cnt = cnt[p]
                t_run[p] = transmittance[row, col]
                sr[p] = t_run[p] * background[0]
                sg[p] = t_run[p] * background[1]
                sb[p] = t_run[p] * background[2]
                dr[p] = d_color[row, col, 0]
                dg[p] = d_color[row, col, 1]
                db[p] = d_color[row, col, 2]
                p += 1
        if max_cnt == 0:
            continue
        for pos in range(max_cnt - 1, -1, -1):
            k = k0 + pos
            s = pair_splat[k]
            mux = packed[s, 0]
            muy = packed[s, 1]
            ca = packed[s, 2]
            cb = packed[s, 3]
            cc = packed[s, 4]
            za = packed[s, 5]
            zb = packed[s, 6]
            c1w = packed[s, 7]
            c2w = packed[s, 8]
            r_s = packed[s, 9]
            g_s = packed[s, 10]
            b_s = packed[s, 11]
            md = mode[s]
            a_mux = 0.0
            a_muy = 0.0
            a_ca = 0.0
            a_cb = 0.0
            a_cc = 0.0
            a_za = 0.0
            a_zb = 0.0
            a_c1 = 0.0
            a_c2 = 0.0
            a_r = 0.0
            a_g = 0.0
            a_b = 0.0
            for p in range(npx):
                if pos >= cnt[p]:
                    continue
                dx = px[p] - mux
                dy = py[p] - muy
                g = exp(-0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy)
                if md == 0:
                    e = _erf(za * dx + zb * dy)
                elif md == 1:
                    e = _sign(za * dx + zb * dy)
                else:
                    e = 0.0
                w_raw = (c1w + c2w * e) * g
                w = w_raw
                if w > WEIGHT_CLAMP:
                    w = WEIGHT_CLAMP
                one_minus = 1.0 - w
                t_prev = t_run[p] / one_minus
                wt = w * t_prev
                a_r += dr[p] * wt
                a_g += dg[p] * wt
                a_b += db[p] * wt
                if w_raw <= WEIGHT_CLAMP:
                    d_w = (dr[p] * (t_prev * r_s - sr[p] / one_minus)
                           + dg[p] * (t_prev * g_s - sg[p] / one_minus)
                           + db[p] * (t_prev * b_s - sb[p] / one_minus))
                    d_g = d_w * (c1w + c2w * e)
                    d_pow = d_g * g
                    a_ca += d_pow * (-0.5) * dx * dx
                    a_cb += d_pow * (-dx * dy)
                    a_cc += d_pow * (-0.5) * dy * dy
                    a_c1 += d_w * g
                    a_c2 += d_w * e * g
                    ddx = d_pow * (-(ca * dx + cb * dy))
                    ddy = d_pow * (-(cc * dy + cb * dx))
                    if md == 0:
                        z = za * dx + zb * dy
                        d_e = d_w * c2w * g
                        d_z = d_e * 2.0 * INV_SQRT_PI * exp(-z * z)
                        a_za += d_z * dx
                        a_zb += d_z * dy
                        ddx += d_z * za
                        ddy += d_z * zb
                    a_mux -= ddx
                    a_muy -= ddy
                sr[p] += wt * r_s
                sg[p] += wt * g_s
                sb[p] += wt * b_s
                t_run[p] = t_prev
            pair_grads[k, 0] += a_mux
            pair_grads[k, 1] += a_muy
            pair_grads[k, 2] += a_ca
            pair_grads[k, 3] += a_cb
            pair_grads[k, 4] += a_cc
            pair_grads[k, 5] += a_za
            pair_grads[k, 6] += a_zb
            pair_grads[k, 7] += a_c1
            pair_grads[k, 8] += a_c2
            pair_grads[k, 9] += a_r
            pair_grads[k, 10] += a_g
            pair_grads[k, 11] += a_b
