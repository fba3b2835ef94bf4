"""Tile-based forward rendering and the exact analytic backward pass.

Per view: project every primitive (covariance to screen, splitting normal to
the whitened ray frame), bin surviving splats into 16x16 tiles, depth-sort
each tile (ties broken by primitive index), then alpha-composite front to
back with the paired half-Gaussian response.  The backward pass replays the
per-pixel recurrence exactly and chains gradients through every projection
stage back to the primitive parameters.

The per-pixel blending loops live in a compiled core with a numpy fallback
(see ``backend``); everything batched per-primitive stays in numpy here.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import EmptyScene, ImageTooLarge, MismatchedForward
from .geometry import (
    LOWPASS_DILATION,
    chol3_batch,
    chol3_vjp,
    perspective_jacobian,
    quat_rot_vjp,
    quat_to_rot,
    sigmoid,
    tri_inv3_batch,
)
from .kernels import NORMAL_EPS
from .sh import eval_color, eval_sh_basis, eval_sh_basis_grad

TILE = 16
# Splat influence radius in units of the largest screen-space sigma.  A bit
# beyond the usual 3 so the bounding-box cut stays far below the gradient
# checks' finite-difference resolution.
RADIUS_SIGMAS = 3.5
MAX_PIXELS = 2**31


@dataclass
class ScreenSplat:
    """One primitive projected into one view."""

    prim_index: int
    mu_hat: np.ndarray
    conic: np.ndarray
    whiten2d: np.ndarray
    n_ray: np.ndarray
    alpha1: float
    alpha2: float
    rgb: np.ndarray
    depth: float
    tile_span: tuple  # (tx0, tx1, ty0, ty1), inclusive


@dataclass
class RenderOutput:
    """Forward-pass result plus the bookkeeping the backward pass replays."""

    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    per_pixel_terminal_index: np.ndarray
    camera: object = None
    transmittance: np.ndarray = None
    frame: object = None


@dataclass
class GradientSet:
    """Per-primitive gradients, index-aligned with the scene."""

    d_mu: np.ndarray
    d_log_scale: np.ndarray
    d_rotation: np.ndarray
    d_sh: np.ndarray
    d_normal: np.ndarray
    d_raw_opacity_a: np.ndarray
    d_raw_opacity_b: np.ndarray
    pos_grad_norm: np.ndarray
    touch_count: np.ndarray

    @classmethod
    def zeros(cls, n, sh_k):
        return cls(
            d_mu=np.zeros((n, 3)),
            d_log_scale=np.zeros((n, 3)),
            d_rotation=np.zeros((n, 4)),
            d_sh=np.zeros((n, sh_k, 3)),
            d_normal=np.zeros((n, 3)),
            d_raw_opacity_a=np.zeros(n),
            d_raw_opacity_b=np.zeros(n),
            pos_grad_norm=np.zeros(n),
            touch_count=np.zeros(n, dtype=np.int64),
        )

    def add(self, other):
        for name in ("d_mu", "d_log_scale", "d_rotation", "d_sh", "d_normal",
                     "d_raw_opacity_a", "d_raw_opacity_b", "pos_grad_norm",
                     "touch_count"):
            getattr(self, name).__iadd__(getattr(other, name))
        return self


@dataclass
class FrameGeometry:
    """Everything the blend kernels and the geometry backward need."""

    n_total: int
    kernel: str
    valid: np.ndarray        # original indices of surviving primitives, (M,)
    packed: np.ndarray       # (M, 13) blend parameters, see _blend_py
    mode: np.ndarray         # (M,) int8
    pair_splat: np.ndarray   # (P,) int32, sorted by (tile, depth, prim index)
    tile_starts: np.ndarray  # (tiles + 1,)
    tiles_x: int
    tiles_y: int
    tile_rect: np.ndarray    # (M, 4) int32 inclusive (tx0, tx1, ty0, ty1)
    # saved intermediates, all length M
    t_cam: np.ndarray
    rot_w2c: np.ndarray      # (3, 3) camera rotation
    jac: np.ndarray          # (M, 3, 3)
    cov_world: np.ndarray
    cov_cam: np.ndarray
    cov_ray: np.ndarray
    chol: np.ndarray
    whiten2d: np.ndarray     # (M, 3) = (V00, V10, V11)
    n_unit: np.ndarray
    normal_norm: np.ndarray
    h_cam: np.ndarray
    h_ray: np.ndarray
    y_white: np.ndarray
    y_norm: np.ndarray
    n_ray: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray
    quat_unit: np.ndarray
    quat_norm: np.ndarray
    scale_exp: np.ndarray
    rot_mats: np.ndarray
    view_dir: np.ndarray
    view_dist: np.ndarray
    basis: np.ndarray
    rgb_unclamped: np.ndarray


def resolve_threads(threads):
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("HALFSPLAT_THREADS")
    if env:
        return max(1, int(env))
    return 1


def prepare(scene, cam, kernel="half"):
    """Project a scene into one view; returns FrameGeometry for blending."""
    if len(scene) == 0:
        raise EmptyScene("cannot render an empty scene")
    if cam.width * cam.height > MAX_PIXELS:
        raise ImageTooLarge(f"{cam.width}x{cam.height} exceeds {MAX_PIXELS} pixels")
    if kernel not in ("half", "full"):
        raise ValueError("kernel must be 'half' or 'full'")

    n = len(scene)
    rot = cam.rotation
    t_all = scene.mu @ rot.T + cam.translation
    in_front = t_all[:, 2] > cam.near_clip

    # covariance build (all primitives; cheap and keeps indexing simple)
    quat_norm = np.linalg.norm(scene.rotation, axis=1)
    quat_unit = scene.rotation / quat_norm[:, None]
    rot_mats = quat_to_rot(quat_unit)
    scale_exp = np.exp(scene.log_scale)
    m_fac = rot_mats * scale_exp[:, None, :]
    cov_world = m_fac @ np.swapaxes(m_fac, 1, 2)

    idx0 = np.nonzero(in_front)[0]
    t = t_all[idx0]
    cov_cam = np.einsum("ab,nbc,dc->nad", rot, cov_world[idx0], rot)
    jac = perspective_jacobian(t, cam.fx, cam.fy)
    cov_ray = np.einsum("nab,nbc,ndc->nad", jac, cov_cam, jac)

    invz = 1.0 / t[:, 2]
    mu_hat = np.stack([
        cam.fx * t[:, 0] * invz + cam.cx,
        cam.fy * t[:, 1] * invz + cam.cy,
    ], axis=1)

    # dilated screen covariance, conic, influence radius
    a = cov_ray[:, 0, 0] + LOWPASS_DILATION
    b = cov_ray[:, 0, 1]
    c = cov_ray[:, 1, 1] + LOWPASS_DILATION
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = RADIUS_SIGMAS * np.sqrt(np.maximum(lam_max, 0.0))

    # pixel j is touched when its center j+0.5 lies within the radius
    x0 = np.ceil(mu_hat[:, 0] - radius - 0.5).astype(np.int64)
    x1 = np.floor(mu_hat[:, 0] + radius - 0.5).astype(np.int64)
    y0 = np.ceil(mu_hat[:, 1] - radius - 0.5).astype(np.int64)
    y1 = np.floor(mu_hat[:, 1] + radius - 0.5).astype(np.int64)
    on_screen = (
        (x1 >= 0) & (x0 <= cam.width - 1) & (y1 >= 0) & (y0 <= cam.height - 1)
        & (x1 >= x0) & (y1 >= y0) & (det > 0)
    )

    keep = np.nonzero(on_screen)[0]
    valid = idx0[keep]
    m = valid.shape[0]

    def sub(arr):
        return np.ascontiguousarray(arr[keep])

    t = sub(t)
    cov_cam = sub(cov_cam)
    cov_ray = sub(cov_ray)
    jac = sub(jac)
    mu_hat = sub(mu_hat)
    a, b, c, det = sub(a), sub(b), sub(c), sub(det)
    x0 = np.clip(sub(x0), 0, cam.width - 1)
    x1 = np.clip(sub(x1), 0, cam.width - 1)
    y0 = np.clip(sub(y0), 0, cam.height - 1)
    y1 = np.clip(sub(y1), 0, cam.height - 1)

    conic_a = c / det
    conic_b = -b / det
    conic_c = a / det

    # whitened ray frame: lower Cholesky of the (undilated) ray covariance
    chol, bad = chol3_batch(cov_ray)
    v00 = 1.0 / chol[:, 0, 0]
    v11 = 1.0 / chol[:, 1, 1]
    v10 = -chol[:, 1, 0] * v00 * v11
    whiten2d = np.stack([v00, v10, v11], axis=1)

    normal_norm = np.linalg.norm(scene.normal[valid], axis=1)
    n_unit = scene.normal[valid] / normal_norm[:, None]
    h_world = np.einsum("nab,nb->na", cov_world[valid], n_unit)
    h_cam = h_world @ rot.T
    h_ray = np.einsum("nab,nb->na", jac, h_cam)
    # forward substitution L y = h_ray
    y0w = h_ray[:, 0] * v00
    y1w = (h_ray[:, 1] - chol[:, 1, 0] * y0w) / chol[:, 1, 1]
    y2w = (h_ray[:, 2] - chol[:, 2, 0] * y0w - chol[:, 2, 1] * y1w) / chol[:, 2, 2]
    y_white = np.stack([y0w, y1w, y2w], axis=1)
    y_norm = np.linalg.norm(y_white, axis=1)
    bad = bad | (y_norm < 1e-12) | ~np.isfinite(y_norm)
    safe_norm = np.where(bad, 1.0, y_norm)
    n_ray = np.where(bad[:, None], [[0.0, 0.0, 1.0]], y_white / safe_norm[:, None])

    alpha1 = sigmoid(scene.raw_opacity_a[valid])
    alpha2 = sigmoid(scene.raw_opacity_b[valid])
    c1 = 0.5 * (alpha1 + alpha2)
    if kernel == "full":
        c2 = np.zeros(m)
        mode = np.full(m, 2, dtype=np.int8)
    else:
        c2 = 0.5 * (alpha1 - alpha2)
        mode = np.zeros(m, dtype=np.int8)
        mode[np.abs(n_ray[:, 2]) < NORMAL_EPS] = 1
        mode[bad] = 2

    za = np.zeros(m)
    zb = np.zeros(m)
    m0 = mode == 0
    inv = np.zeros(m)
    inv[m0] = 1.0 / (np.sqrt(2.0) * np.abs(n_ray[m0, 2]))
    za[m0] = inv[m0] * (n_ray[m0, 0] * v00[m0] + n_ray[m0, 1] * v10[m0])
    zb[m0] = inv[m0] * (n_ray[m0, 1] * v11[m0])
    m1 = mode == 1
    za[m1] = n_ray[m1, 0] * v00[m1] + n_ray[m1, 1] * v10[m1]
    zb[m1] = n_ray[m1, 1] * v11[m1]

    # view-dependent color from the camera center to each primitive mean
    view_vec = scene.mu[valid] - cam.center
    view_dist = np.linalg.norm(view_vec, axis=1)
    view_dir = view_vec / view_dist[:, None]
    basis = np.atleast_2d(eval_sh_basis(view_dir, scene.sh_degree))
    rgb_unclamped = np.einsum("nk,nkc->nc", basis, scene.sh_coeffs[valid]) + 0.5
    rgb = np.maximum(rgb_unclamped, 0.0)

    packed = np.empty((m, 13))
    packed[:, 0] = mu_hat[:, 0]
    packed[:, 1] = mu_hat[:, 1]
    packed[:, 2] = conic_a
    packed[:, 3] = conic_b
    packed[:, 4] = conic_c
    packed[:, 5] = za
    packed[:, 6] = zb
    packed[:, 7] = c1
    packed[:, 8] = c2
    packed[:, 9:12] = rgb
    packed[:, 12] = t[:, 2]

    # tile binning: one pair per (tile, splat), sorted by tile then depth,
    # ties broken by original primitive index for determinism
    tiles_x = (cam.width + TILE - 1) // TILE
    tiles_y = (cam.height + TILE - 1) // TILE
    tx0 = (x0 // TILE).astype(np.int64)
    tx1 = (x1 // TILE).astype(np.int64)
    ty0 = (y0 // TILE).astype(np.int64)
    ty1 = (y1 // TILE).astype(np.int64)
    spans_x = tx1 - tx0 + 1
    spans_y = ty1 - ty0 + 1
    counts = spans_x * spans_y
    total = int(counts.sum())
    splat_of_pair = np.repeat(np.arange(m, dtype=np.int64), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)])[:-1]
    local = np.arange(total, dtype=np.int64) - np.repeat(offsets, counts)
    lx = local % np.repeat(spans_x, counts)
    ly = local // np.repeat(spans_x, counts)
    tile_of_pair = (np.repeat(ty0, counts) + ly) * tiles_x + np.repeat(tx0, counts) + lx
    order = np.lexsort((
        valid[splat_of_pair],
        packed[splat_of_pair, 12],
        tile_of_pair,
    ))
    pair_splat = splat_of_pair[order].astype(np.int32)
    tile_sorted = tile_of_pair[order]
    tile_starts = np.searchsorted(tile_sorted, np.arange(tiles_x * tiles_y + 1))

    return FrameGeometry(
        n_total=n, kernel=kernel, valid=valid, packed=packed, mode=mode,
        pair_splat=pair_splat, tile_starts=tile_starts.astype(np.int64),
        tiles_x=tiles_x, tiles_y=tiles_y,
        tile_rect=np.stack([tx0, tx1, ty0, ty1], axis=1).astype(np.int32),
        t_cam=t, rot_w2c=rot, jac=jac, cov_world=cov_world[valid],
        cov_cam=cov_cam, cov_ray=cov_ray, chol=chol, whiten2d=whiten2d,
        n_unit=n_unit, normal_norm=normal_norm, h_cam=h_cam, h_ray=h_ray,
        y_white=y_white, y_norm=safe_norm, n_ray=n_ray,
        alpha1=alpha1, alpha2=alpha2,
        quat_unit=quat_unit[valid], quat_norm=quat_norm[valid],
        scale_exp=scale_exp[valid], rot_mats=rot_mats[valid],
        view_dir=view_dir, view_dist=view_dist, basis=basis,
        rgb_unclamped=rgb_unclamped,
    )


def _tile_chunks(n_tiles, threads):
    if threads <= 1 or n_tiles <= 1:
        return [(0, n_tiles)]
    per = (n_tiles + threads - 1) // threads
    return [(i, min(i + per, n_tiles)) for i in range(0, n_tiles, per)]


def render(scene, cam, kernel="half", threads=None, frame=None):
    """Render one view.  Deterministic for any thread count."""
    threads = resolve_threads(threads)
    if frame is None:
        frame = prepare(scene, cam, kernel)
    h, w = cam.height, cam.width
    color = np.zeros((h, w, 3))
    alpha = np.zeros((h, w))
    depth = np.zeros((h, w))
    transmittance = np.ones((h, w))
    terminal = np.zeros((h, w), dtype=np.int32)
    blend = backend.get_backend()
    n_tiles = frame.tiles_x * frame.tiles_y
    bg = scene.background_color

    def run(lo, hi):
        blend.forward_tiles(
            frame.packed, frame.mode, frame.pair_splat, frame.tile_starts,
            h, w, frame.tiles_x, bg, color, alpha, depth, transmittance,
            terminal, lo, hi,
        )

    chunks = _tile_chunks(n_tiles, threads)
    if len(chunks) == 1:
        run(*chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda span: run(*span), chunks))
    return RenderOutput(
        color=color, alpha=alpha, depth=depth,
        per_pixel_terminal_index=terminal, camera=cam,
        transmittance=transmittance, frame=frame,
    )


def render_backward(scene, cam, out, d_color, threads=None):
    """Gradients of sum(d_color * rendered color) for every parameter."""
    threads = resolve_threads(threads)
    frame = out.frame
    if frame is None or frame.n_total != len(scene):
        raise MismatchedForward("forward bookkeeping does not match the scene")
    if d_color.shape != (cam.height, cam.width, 3):
        raise MismatchedForward(
            f"cotangent shape {d_color.shape} != {(cam.height, cam.width, 3)}"
        )
    if out.per_pixel_terminal_index.shape != (cam.height, cam.width):
        raise MismatchedForward("terminal-index shape mismatch")

    d_color = np.ascontiguousarray(d_color, dtype=np.float64)
    pair_grads = np.zeros((frame.pair_splat.shape[0], 12))
    blend = backend.get_backend()
    n_tiles = frame.tiles_x * frame.tiles_y

    def run(lo, hi):
        blend.backward_tiles(
            frame.packed, frame.mode, frame.pair_splat, frame.tile_starts,
            cam.height, cam.width, frame.tiles_x, scene.background_color,
            d_color, out.transmittance, out.per_pixel_terminal_index,
            pair_grads, lo, hi,
        )

    chunks = _tile_chunks(n_tiles, threads)
    if len(chunks) == 1:
        run(*chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda span: run(*span), chunks))

    merged = np.zeros((frame.valid.shape[0], 12))
    np.add.at(merged, frame.pair_splat, pair_grads)
    return _geometry_backward(scene, cam, frame, merged)


def _geometry_backward(scene, cam, frame, merged):
    """Chain per-splat screen-space gradients back to primitive parameters."""
    n = frame.n_total
    grads = GradientSet.zeros(n, scene.sh_coeffs.shape[1])
    m = frame.valid.shape[0]
    if m == 0:
        return grads

    d_mu_hat = merged[:, 0:2]
    d_conic = merged[:, 2:5]        # (d_ca, d_cb, d_cc)
    d_za, d_zb = merged[:, 5], merged[:, 6]
    d_c1, d_c2 = merged[:, 7], merged[:, 8]
    d_rgb = merged[:, 9:12]

    rot = frame.rot_w2c
    t = frame.t_cam
    jac = frame.jac
    chol = frame.chol
    v00, v10, v11 = frame.whiten2d.T
    n_ray = frame.n_ray
    mode0 = frame.mode == 0

    # opacities: c1 = (a1 + a2)/2, c2 = (a1 - a2)/2, a = sigmoid(raw)
    d_a1 = 0.5 * (d_c1 + d_c2)
    d_a2 = 0.5 * (d_c1 - d_c2)
    grads.d_raw_opacity_a[frame.valid] = d_a1 * frame.alpha1 * (1.0 - frame.alpha1)
    grads.d_raw_opacity_b[frame.valid] = d_a2 * frame.alpha2 * (1.0 - frame.alpha2)

    # erf coefficients: za = inv*(n1 v00 + n2 v10), zb = inv*n2*v11,
    # inv = 1/(sqrt(2)|n3|); zero gradients off mode 0
    n1, n2, n3 = n_ray[:, 0], n_ray[:, 1], n_ray[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(mode0, 1.0 / (np.sqrt(2.0) * np.abs(n3)), 0.0)
    d_za0 = np.where(mode0, d_za, 0.0)
    d_zb0 = np.where(mode0, d_zb, 0.0)
    d_inv = d_za0 * (n1 * v00 + n2 * v10) + d_zb0 * (n2 * v11)
    d_nray = np.zeros((m, 3))
    d_nray[:, 0] = d_za0 * inv * v00
    d_nray[:, 1] = d_za0 * inv * v10 + d_zb0 * inv * v11
    d_nray[:, 2] = np.where(mode0, -d_inv * np.sign(n3) / (np.sqrt(2.0) * n3 * n3), 0.0)
    d_v00 = d_za0 * inv * n1
    d_v10 = d_za0 * inv * n2
    d_v11 = d_zb0 * inv * n2

    # n_ray = y / |y|
    d_y = (d_nray - (d_nray * n_ray).sum(1, keepdims=True) * n_ray) / frame.y_norm[:, None]
    # y = L^{-1} h_ray  =>  d_h = L^{-T} d_y,  d_L = -d_h y^T (lower)
    linv = tri_inv3_batch(chol)
    d_h_ray = np.einsum("nba,nb->na", linv, d_y)
    d_chol = -np.einsum("na,nb->nab", d_h_ray, frame.y_white)
    # whiten2d = inv(L[:2,:2]): d_L2 = -V^T dV V^T
    dv = np.zeros((m, 2, 2))
    dv[:, 0, 0] = d_v00
    dv[:, 1, 0] = d_v10
    dv[:, 1, 1] = d_v11
    vmat = np.zeros((m, 2, 2))
    vmat[:, 0, 0] = v00
    vmat[:, 1, 0] = v10
    vmat[:, 1, 1] = v11
    vt = np.swapaxes(vmat, 1, 2)
    d_chol[:, :2, :2] += -(vt @ dv @ vt)
    d_chol = np.tril(d_chol)
    d_cov_ray = chol3_vjp(chol, d_chol)

    # conic = inverse of the dilated 2x2 screen covariance (a, b, c)
    a = frame.cov_ray[:, 0, 0] + LOWPASS_DILATION
    b = frame.cov_ray[:, 0, 1]
    c = frame.cov_ray[:, 1, 1] + LOWPASS_DILATION
    det = a * c - b * b
    det2 = det * det
    d_ca, d_cb, d_cc = d_conic.T
    d_a = (-d_ca * c * c + d_cb * b * c - d_cc * b * b) / det2
    d_b = (2.0 * d_ca * b * c - d_cb * (det + 2.0 * b * b) + 2.0 * d_cc * a * b) / det2
    d_c = (-d_ca * b * b + d_cb * a * b - d_cc * a * a) / det2
    d_cov_ray[:, 0, 0] += d_a
    d_cov_ray[:, 0, 1] += d_b
    d_cov_ray[:, 1, 1] += d_c

    # cov_ray = J cov_cam J^T and h_ray = J h_cam
    sym = d_cov_ray + np.swapaxes(d_cov_ray, 1, 2)
    d_jac = sym @ jac @ frame.cov_cam
    d_cov_cam = np.einsum("nba,nbc,ncd->nad", jac, d_cov_ray, jac)
    d_jac += np.einsum("na,nb->nab", d_h_ray, frame.h_cam)
    d_h_cam = np.einsum("nba,nb->na", jac, d_h_ray)

    # cov_cam = W cov W^T, h_cam = W h
    d_cov = np.einsum("ba,nbc,cd->nad", rot, d_cov_cam, rot)
    d_h = d_h_cam @ rot

    # h = cov @ n_unit
    d_cov += np.einsum("na,nb->nab", d_h, frame.n_unit)
    d_n_unit = np.einsum("nba,nb->na", frame.cov_world, d_h)

    # projection mean
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    invz = 1.0 / tz
    d_t = np.zeros((m, 3))
    d_t[:, 0] += d_mu_hat[:, 0] * cam.fx * invz
    d_t[:, 1] += d_mu_hat[:, 1] * cam.fy * invz
    d_t[:, 2] += (
        -d_mu_hat[:, 0] * cam.fx * tx * invz * invz
        - d_mu_hat[:, 1] * cam.fy * ty * invz * invz
    )

    # Jacobian entries vs the camera-space center
    ell = np.sqrt(tx * tx + ty * ty + tz * tz)
    d_t[:, 2] += d_jac[:, 0, 0] * (-cam.fx * invz * invz)
    d_t[:, 0] += d_jac[:, 0, 2] * (-cam.fx * invz * invz)
    d_t[:, 2] += d_jac[:, 0, 2] * (2.0 * cam.fx * tx * invz**3)
    d_t[:, 2] += d_jac[:, 1, 1] * (-cam.fy * invz * invz)
    d_t[:, 1] += d_jac[:, 1, 2] * (-cam.fy * invz * invz)
    d_t[:, 2] += d_jac[:, 1, 2] * (2.0 * cam.fy * ty * invz**3)
    r_hat = t / ell[:, None]
    d_row3 = d_jac[:, 2, :]
    d_t += (d_row3 - (d_row3 * r_hat).sum(1, keepdims=True) * r_hat) / ell[:, None]

    d_mu = d_t @ rot

    # spherical harmonics color (clamped below at zero)
    active = (frame.rgb_unclamped > 0.0).astype(np.float64)
    d_rgb_pre = d_rgb * active
    d_sh = np.einsum("nk,nc->nkc", frame.basis, d_rgb_pre)
    if scene.sh_degree > 0:
        basis_grad = eval_sh_basis_grad(frame.view_dir, scene.sh_degree)
        d_basis = np.einsum("nkc,nc->nk", scene.sh_coeffs[frame.valid], d_rgb_pre)
        d_dir = np.einsum("nk,nkd->nd", d_basis, basis_grad)
        d_view = (d_dir - (d_dir * frame.view_dir).sum(1, keepdims=True)
                  * frame.view_dir) / frame.view_dist[:, None]
        d_mu += d_view

    # covariance build: cov = M M^T, M = R diag(s)
    m_fac = frame.rot_mats * frame.scale_exp[:, None, :]
    d_m = (d_cov + np.swapaxes(d_cov, 1, 2)) @ m_fac
    d_rotm = d_m * frame.scale_exp[:, None, :]
    d_s = np.einsum("nik,nik->nk", d_m, frame.rot_mats)
    d_log_scale = d_s * frame.scale_exp
    d_qu = quat_rot_vjp(frame.quat_unit, d_rotm)
    d_quat = (d_qu - (d_qu * frame.quat_unit).sum(1, keepdims=True)
              * frame.quat_unit) / frame.quat_norm[:, None]

    # splitting normal: n_unit = n / |n|
    d_normal = (d_n_unit - (d_n_unit * frame.n_unit).sum(1, keepdims=True)
                * frame.n_unit) / frame.normal_norm[:, None]

    grads.d_mu[frame.valid] = d_mu
    grads.d_log_scale[frame.valid] = d_log_scale
    grads.d_rotation[frame.valid] = d_quat
    grads.d_sh[frame.valid] = d_sh
    grads.d_normal[frame.valid] = d_normal
    grads.pos_grad_norm[frame.valid] = np.linalg.norm(d_mu_hat, axis=1)
    grads.touch_count[frame.valid] = 1
    return grads


def screen_splats(scene, cam, kernel="half"):
    """Per-primitive projected splats for one view (introspection helper)."""
    frame = prepare(scene, cam, kernel)
    out = []
    for i in range(frame.valid.shape[0]):
        conic = np.array([
            [frame.packed[i, 2], frame.packed[i, 3]],
            [frame.packed[i, 3], frame.packed[i, 4]],
        ])
        v = np.array([
            [frame.whiten2d[i, 0], 0.0],
            [frame.whiten2d[i, 1], frame.whiten2d[i, 2]],
        ])
        out.append(ScreenSplat(
            prim_index=int(frame.valid[i]),
            mu_hat=frame.packed[i, 0:2].copy(),
            conic=conic,
            whiten2d=v,
            n_ray=frame.n_ray[i].copy(),
            alpha1=float(frame.alpha1[i]),
            alpha2=float(frame.alpha2[i]),
            rgb=frame.packed[i, 9:12].copy(),
            depth=float(frame.packed[i, 12]),
            tile_span=tuple(int(x) for x in frame.tile_rect[i]),
        ))
    return out


def render_depth_normalmap(out, alpha_threshold=0.5):
    """Per-pixel normals from screen-space depth differences.

    Depths are backprojected through the camera intrinsics; normals come
    from the cross product of the central-difference tangents, unit length, oriented
    toward the camera (z <= 0), and zeroed wherever the pixel or any
    neighbor it uses falls below the alpha threshold.
    """
    cam = out.camera
    depth = out.depth
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    pts = np.stack([
        depth * (px - cam.cx) / cam.fx,
        depth * (py - cam.cy) / cam.fy,
        depth,
    ], axis=-1)
    valid = out.alpha >= alpha_threshold

    normals = np.zeros((h, w, 3))
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    ok = (
        valid[1:-1, 1:-1]
        & valid[1:-1, 2:] & valid[1:-1, :-2]
        & valid[2:, 1:-1] & valid[:-2, 1:-1]
    )
    cross = np.cross(dx, dy)
    norm = np.linalg.norm(cross, axis=-1)
    ok &= norm > 1e-12
    cross = np.where(ok[..., None], cross / np.where(norm > 1e-12, norm, 1.0)[..., None], 0.0)
    flip = cross[..., 2] > 0
    cross[flip] = -cross[flip]
    normals[1:-1, 1:-1] = cross
    return normals
