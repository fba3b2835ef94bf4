"""Real spherical-harmonics color evaluation, degrees 0..3.

Basis ordering and signs follow the de-facto splatting-file convention
(band 1 ordered as -y, z, -x), so imported point files keep their colors.
Colors are offset by +0.5 and floored at 0.
"""

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

BASIS_COUNT = {0: 1, 1: 4, 2: 9, 3: 16}


def eval_sh_basis(dirs, degree):
    """Basis values for unit direction(s); shape (..., (degree+1)^2)."""
    if degree not in BASIS_COUNT:
        raise ValueError("degree must be 0..3")
    d = np.asarray(dirs, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((d.shape[0], BASIS_COUNT[degree]), dtype=np.float64)
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out[0] if single else out


def eval_sh_basis_grad(dirs, degree):
    """d basis / d direction, shape (..., (degree+1)^2, 3).

    Derivatives w.r.t. the raw (x, y, z) components; chaining through the
    normalization of the view direction is the caller's job.
    """
    d = np.asarray(dirs, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    zero = np.zeros_like(x)
    g = np.zeros((d.shape[0], BASIS_COUNT[degree], 3), dtype=np.float64)
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4] = SH_C2[0] * np.stack([y, x, zero], -1)
        g[:, 5] = SH_C2[1] * np.stack([zero, z, y], -1)
        g[:, 6] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], -1)
        g[:, 7] = SH_C2[3] * np.stack([z, zero, x], -1)
        g[:, 8] = SH_C2[4] * np.stack([2 * x, -2 * y, zero], -1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9] = SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], -1)
        g[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], -1)
        g[:, 11] = SH_C3[2] * np.stack(
            [-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], -1)
        g[:, 12] = SH_C3[3] * np.stack(
            [-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], -1)
        g[:, 13] = SH_C3[4] * np.stack(
            [4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], -1)
        g[:, 14] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], -1)
        g[:, 15] = SH_C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], -1)
    return g[0] if single else g


def eval_color(sh_coeffs, dirs):
    """RGB from coefficients (..., K, 3) and unit view direction(s)."""
    c = np.asarray(sh_coeffs, dtype=np.float64)
    single = c.ndim == 2
    c = c[None] if single else c
    k = c.shape[1]
    degree = {1: 0, 4: 1, 9: 2, 16: 3}[k]
    basis = np.atleast_2d(eval_sh_basis(dirs, degree))
    rgb = np.einsum("nk,nkc->nc", basis, c) + 0.5
    rgb = np.maximum(rgb, 0.0)
    return rgb[0] if single else rgb
