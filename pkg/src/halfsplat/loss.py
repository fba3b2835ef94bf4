"""Training loss: (1 - lambda) L1 + lambda (1 - SSIM), with exact gradients.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5), stabilizers
C1 = 0.01^2 and C2 = 0.03^2, channels averaged, computed over a zero-padded
same-size map.  The same implementation backs the evaluation metric.
"""

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ImageTooSmall, ShapeMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _window():
    half = SSIM_WINDOW // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-0.5 * (t / SSIM_SIGMA) ** 2)
    return w / w.sum()


_W = _window()


def _filt(img):
    """Separable Gaussian blur, zero padding; self-adjoint for symmetric w."""
    out = correlate1d(img, _W, axis=0, mode="constant")
    return correlate1d(out, _W, axis=1, mode="constant")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ShapeMismatch("expected HxW or HxWxC images")
    return a, b


def ssim_with_grad(a, b):
    """Mean SSIM of a against b and d(mean SSIM)/da."""
    a, b = _check_pair(a, b)
    h, w, ch = a.shape
    if min(h, w) < SSIM_WINDOW:
        raise ImageTooSmall(f"needs at least {SSIM_WINDOW} pixels on each side")
    total = 0.0
    grad = np.zeros_like(a)
    n = h * w * ch
    for c in range(ch):
        x = a[..., c]
        y = b[..., c]
        m1 = _filt(x)
        m2 = _filt(y)
        s1 = _filt(x * x) - m1 * m1
        s2 = _filt(y * y) - m2 * m2
        s12 = _filt(x * y) - m1 * m2
        a1 = 2.0 * m1 * m2 + SSIM_C1
        a2 = 2.0 * s12 + SSIM_C2
        b1 = m1 * m1 + m2 * m2 + SSIM_C1
        b2 = s1 + s2 + SSIM_C2
        smap = (a1 * a2) / (b1 * b2)
        total += smap.sum()
        d_m1 = (2.0 * m2 * a2 / (b1 * b2) - 2.0 * m1 * a1 * a2 / (b1 * b1 * b2)) / n
        d_s1 = (-a1 * a2 / (b1 * b2 * b2)) / n
        d_s12 = (2.0 * a1 / (b1 * b2)) / n
        grad[..., c] = (
            _filt(d_m1 - 2.0 * m1 * d_s1 - m2 * d_s12)
            + 2.0 * x * _filt(d_s1)
            + y * _filt(d_s12)
        )
    return total / n, grad


def ssim(a, b):
    """Mean SSIM in [-1, 1]; exactly 1.0 for identical images."""
    value, _ = ssim_with_grad(a, b)
    return value


def compute_loss(rendered, target, lambda_ssim=0.2):
    """Loss scalar plus its exact gradient w.r.t. the rendered image."""
    a, b = _check_pair(rendered, target)
    if not 0.0 <= lambda_ssim <= 1.0:
        raise ValueError("lambda_ssim must lie in [0, 1]")
    n = a.size
    diff = a - b
    l1 = np.abs(diff).mean()
    d_l1 = np.sign(diff) / n
    if lambda_ssim == 0.0:
        loss = l1
        grad = (1.0 - lambda_ssim) * d_l1
    else:
        s_val, s_grad = ssim_with_grad(a, b)
        loss = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s_val)
        grad = (1.0 - lambda_ssim) * d_l1 - lambda_ssim * s_grad
    if np.asarray(rendered).ndim == 2:
        grad = grad[..., 0]
    return float(loss), grad
