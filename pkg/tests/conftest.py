import math

import numpy as np
import pytest

from halfsplat.geometry import CameraModel


def series_erf(z):
    """High-precision erf oracle: Taylor series, exact where cancellation bites.

    For |z| < 2 the alternating float series with exact (fsum) summation is
    already good to ~1e-15.  Beyond that the series is evaluated in exact
    rational arithmetic, so the only rounding is the final float conversion.
    Independent of the production polynomial approximation.
    """
    if z < 0:
        return -series_erf(-z)
    if z == 0.0:
        return 0.0
    if z > 5.9:  # 1 - erf(5.9) < 1e-16
        return 1.0
    if z < 2.0:
        terms = []
        term = z
        n = 0
        while abs(term) > 1e-25 and n < 200:
            terms.append(term / (2 * n + 1))
            n += 1
            term *= -z * z / n
        return 2.0 / math.sqrt(math.pi) * math.fsum(terms)
    from fractions import Fraction

    zf = Fraction(z)
    z2 = zf * zf
    total = Fraction(0)
    term = zf
    n = 0
    cutoff = Fraction(1, 10**22)
    while True:
        contrib = term / (2 * n + 1)
        total += contrib if n % 2 == 0 else -contrib
        n += 1
        term = term * z2 / n
        if term < cutoff * (2 * n + 1):
            break
    return float(total) * (2.0 / math.sqrt(math.pi))


def random_spd3(rng, scale_lo=0.3, scale_hi=2.0):
    """Random well-conditioned symmetric positive-definite 3x3 matrix."""
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    lam = rng.uniform(scale_lo**2, scale_hi**2, size=3)
    return q @ np.diag(lam) @ q.T


def random_unit(rng, n=None):
    v = rng.normal(size=3 if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def look_at_camera(position, target, width=64, height=64, focal=60.0, up=(0, 1, 0)):
    """Camera at `position` looking toward `target` (y-down image frame)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = r
    w2c[:3, 3] = -r @ position
    return CameraModel(
        world_to_cam=w2c, fx=focal, fy=focal,
        cx=width / 2.0, cy=height / 2.0, width=width, height=height,
    )


def identity_camera(width=64, height=64, focal=60.0):
    return CameraModel(
        world_to_cam=np.eye(4), fx=focal, fy=focal,
        cx=width / 2.0, cy=height / 2.0, width=width, height=height,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
