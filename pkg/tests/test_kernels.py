import math

import numpy as np
import pytest

from halfsplat import kernels
from halfsplat.errors import QuadratureNonConvergence
from halfsplat.kernels import (
    SplatResponseParams,
    closed_form_line_integral,
    erf_scale,
    fast_erf,
    general_sigma_integral,
    half_gaussian_density,
    oracle_line_integral,
    paired_response,
)

from conftest import random_spd3, random_unit, series_erf

SQRT_2PI = math.sqrt(2.0 * math.pi)


def test_series_oracle_matches_mpmath():
    mpmath = pytest.importorskip("mpmath")
    for z in (-4.4, -3.7, -1.0, -0.2, 0.0, 0.5, 1.0, 2.3, 2.9, 4.4, 5.5):
        assert abs(series_erf(z) - float(mpmath.erf(z))) < 5e-14


def test_fast_erf_accuracy():
    # sparse check straight against the series oracle, clustered near the
    # branch boundaries of the piecewise fit
    zs = np.concatenate([
        np.linspace(-6.0, 6.0, 241),
        np.linspace(0.95, 1.05, 21),
        np.linspace(2.35, 2.45, 21),
        np.linspace(4.45, 4.55, 21),
    ])
    errs = np.abs(fast_erf(zs) - np.array([series_erf(float(z)) for z in zs]))
    assert errs.max() <= 1.5e-7
    # the actual fit is far tighter; keep a regression bound
    assert errs.max() < 5e-9


def test_fast_erf_accuracy_dense():
    # mpmath (itself validated against the exact series above) on a dense grid
    mpmath = pytest.importorskip("mpmath")
    zs = np.linspace(-6.0, 6.0, 24001)
    ref = np.array([float(mpmath.erf(z)) for z in zs])
    errs = np.abs(fast_erf(zs) - ref)
    assert errs.max() <= 1.5e-7
    assert errs.max() < 5e-9


def test_fast_erf_odd_symmetry_bitwise():
    zs = np.random.default_rng(1).uniform(-6, 6, 10000)
    a = fast_erf(zs)
    b = fast_erf(-zs)
    assert np.array_equal(a, -b)


def test_fast_erf_scalar_and_bounds():
    assert fast_erf(0.0) == 0.0
    assert fast_erf(10.0) == 1.0
    assert np.all(np.abs(fast_erf(np.linspace(-50, 50, 999))) <= 1.0)


class TestHalfGaussianDensity:
    def test_center_on_positive_side(self):
        n = np.array([0.3, -0.5, 0.81])
        n /= np.linalg.norm(n)
        assert half_gaussian_density([1, 2, 3], [1, 2, 3], np.eye(3), n) == 1.0

    def test_wrong_side_is_zero(self):
        # n^T (x - mu) < 0 on the positive side query
        assert half_gaussian_density([0, 0, -1], [0, 0, 0], np.eye(3), [0, 0, 1]) == 0.0
        assert half_gaussian_density(
            [0, 0, -1], [0, 0, 0], np.eye(3), [0, 0, 1], side="negative"
        ) > 0.0

    def test_partition_of_space(self, rng):
        for _ in range(50):
            cov = random_spd3(rng)
            mu = rng.normal(size=3)
            x = rng.normal(size=3)
            n = random_unit(rng)
            total = half_gaussian_density(x, mu, cov, n) + half_gaussian_density(
                x, mu, cov, n, side="negative"
            )
            d = x - mu
            full = math.exp(-0.5 * d @ np.linalg.solve(cov, d))
            assert total == pytest.approx(full, rel=1e-12)


class TestErfScale:
    def test_view_aligned_plane(self, rng):
        for _ in range(20):
            u = rng.normal(size=2)
            assert erf_scale([0.0, 0.0, 1.0], u) == 1.0

    def test_sign_limit(self):
        assert erf_scale([1.0, 0.0, 1e-9], [3.0, 0.0]) == 2.0
        assert erf_scale([1.0, 0.0, 1e-9], [-3.0, 0.0]) == 0.0
        assert erf_scale([1.0, 0.0, 0.0], [0.0, 0.0]) == 1.0

    def test_tilted_value_against_series_oracle(self):
        got = erf_scale([0.6, 0.0, 0.8], [1.0, 0.0])
        want = 1.0 + series_erf(0.6 / (math.sqrt(2.0) * 0.8))
        assert got == pytest.approx(want, abs=1.5e-7)

    def test_negative_n3_uses_magnitude(self):
        up = erf_scale([0.6, 0.0, 0.8], [1.0, 0.0])
        down = erf_scale([0.6, 0.0, -0.8], [1.0, 0.0])
        assert up == down

    def test_continuity_across_threshold(self):
        # at |n3| = eps with a large argument, the erf branch saturates to
        # the same value as the sign limit
        u = [1.0, 0.0]
        just_above = erf_scale([1.0, 0.0, 1.000001e-6], u)
        below = erf_scale([1.0, 0.0, 0.999999e-6], u)
        assert abs(just_above - below) < 1e-6

    def test_range(self, rng):
        for _ in range(200):
            n = random_unit(rng)
            val = erf_scale(n, rng.normal(size=2) * 3)
            assert 0.0 <= val <= 2.0


def _params(rng, alpha1=None, alpha2=None):
    cov2 = random_spd3(rng)[:2, :2] + 0.3 * np.eye(2)
    return SplatResponseParams(
        conic=np.linalg.inv(cov2),
        mu_hat=rng.uniform(0, 32, 2),
        n_ray=random_unit(rng),
        alpha1=rng.uniform(0.05, 0.95) if alpha1 is None else alpha1,
        alpha2=rng.uniform(0.05, 0.95) if alpha2 is None else alpha2,
        whiten2d=np.linalg.inv(np.linalg.cholesky(cov2)),
    )


class TestPairedResponse:
    def test_equal_opacity_reduces_to_plain_gaussian(self, rng):
        for _ in range(50):
            alpha = rng.uniform(0.05, 0.95)
            p = _params(rng, alpha1=alpha, alpha2=alpha)
            pix = rng.uniform(0, 32, 2)
            d = pix - p.mu_hat
            g = np.exp(-0.5 * (d @ p.conic @ d))
            assert paired_response(p, pix) == min(alpha * g, 0.99)

    def test_center_value_with_view_aligned_normal(self, rng):
        p = _params(rng, alpha1=0.8, alpha2=0.2)
        p.n_ray = np.array([0.0, 0.0, 1.0])
        assert paired_response(p, p.mu_hat) == pytest.approx(0.5, abs=1e-12)

    def test_odd_symmetry(self, rng):
        for _ in range(100):
            p = _params(rng)
            q = SplatResponseParams(
                conic=p.conic, mu_hat=p.mu_hat, n_ray=-p.n_ray,
                alpha1=p.alpha2, alpha2=p.alpha1, whiten2d=p.whiten2d,
            )
            pix = rng.uniform(0, 32, 2)
            assert paired_response(p, pix) == paired_response(q, pix)

    def test_monotone_in_opacities(self, rng):
        for _ in range(50):
            p = _params(rng, alpha1=0.4, alpha2=0.3)
            pix = p.mu_hat + rng.normal(size=2)
            up1 = SplatResponseParams(p.conic, p.mu_hat, p.n_ray, 0.5, 0.3, p.whiten2d)
            up2 = SplatResponseParams(p.conic, p.mu_hat, p.n_ray, 0.4, 0.4, p.whiten2d)
            base = paired_response(p, pix)
            assert paired_response(up1, pix) >= base
            assert paired_response(up2, pix) >= base

    def test_range(self, rng):
        for _ in range(200):
            p = _params(rng)
            val = paired_response(p, rng.uniform(-5, 40, 2))
            assert 0.0 <= val <= 0.99


class TestOracleLineIntegral:
    def test_full_gaussian_center_ray(self, rng):
        n = random_unit(rng)
        got = oracle_line_integral(
            [0, 0, 0], np.eye(3), n, 1.0, 1.0, [0, 0, -10], [0, 0, 1]
        )
        assert got == pytest.approx(SQRT_2PI, rel=1e-9)

    def test_half_mass_center_ray(self):
        got = oracle_line_integral(
            [0, 0, 0], np.eye(3), [0, 0, 1], 1.0, 0.0, [0, 0, -10], [0, 0, 1]
        )
        assert got == pytest.approx(SQRT_2PI / 2.0, rel=1e-9)

    def test_nonconvergence_raises(self):
        with pytest.raises(QuadratureNonConvergence):
            oracle_line_integral(
                [0, 0, 0], np.eye(3), [0, 0, 1], 1.0, 0.5,
                [0.3, -0.2, -9.0], [0, 0, 1], tol=1e-16, max_levels=2,
            )

    def test_tilted_half_matches_erf_factor(self, rng):
        # single half against the analytic (1 + erf) factor
        for _ in range(20):
            n = random_unit(rng)
            if abs(n[2]) < 0.05:
                continue
            x, y = rng.uniform(-1.5, 1.5, 2)
            got = oracle_line_integral(
                [0, 0, 0], np.eye(3), n, 1.0, 0.0, [x, y, -12.0], [0, 0, 1]
            )
            factor = 0.5 * (1.0 + series_erf((n[0] * x + n[1] * y) / (math.sqrt(2) * abs(n[2]))))
            want = SQRT_2PI * math.exp(-0.5 * (x * x + y * y)) * factor
            assert got == pytest.approx(want, rel=1e-8, abs=1e-9)


def random_config(rng):
    cov = random_spd3(rng)
    mu = rng.normal(size=3)
    n = random_unit(rng)
    a1, a2 = rng.uniform(0.05, 0.95, 2)
    d = random_unit(rng)
    # ray passing within ~2 sigma of the center
    offset = rng.normal(size=3)
    offset -= (offset @ d) * d
    chol = np.linalg.cholesky(cov)
    offset *= rng.uniform(0.0, 2.0) / max(np.linalg.norm(np.linalg.solve(chol, offset)), 1e-9)
    origin = mu + offset - 20.0 * d
    return mu, cov, n, a1, a2, origin, d


class TestClosedFormAgainstOracle:
    def test_random_configs(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(200):
            mu, cov, n, a1, a2, origin, d = random_config(rng)
            closed = closed_form_line_integral(mu, cov, n, a1, a2, origin, d)
            oracle = oracle_line_integral(mu, cov, n, a1, a2, origin, d)
            rel = abs(closed - oracle) / max(oracle, 1e-12)
            worst = max(worst, rel)
        assert worst <= 1e-5

    def test_flip_canary_breaks_agreement(self):
        rng = np.random.default_rng(11)
        kernels.set_debug_flip_erf(True)
        try:
            worst = 0.0
            for _ in range(50):
                mu, cov, n, a1, a2, origin, d = random_config(rng)
                closed = closed_form_line_integral(mu, cov, n, a1, a2, origin, d)
                oracle = oracle_line_integral(mu, cov, n, a1, a2, origin, d)
                worst = max(worst, abs(closed - oracle) / max(oracle, 1e-12))
        finally:
            kernels.set_debug_flip_erf(False)
        assert worst > 1e-3


class TestGeneralSigmaIntegral:
    def test_centered_unsplit(self):
        got = general_sigma_integral(0, 0, 1, 1, 1, [0, 0, 1])
        assert got == pytest.approx(1.0 / (2 * math.pi), rel=1e-12)

    def test_view_aligned_reduces_to_2d_gaussian(self, rng):
        for _ in range(20):
            x, y = rng.normal(size=2)
            got = general_sigma_integral(x, y, 1.3, 0.7, 1.0, [0, 0, 1])
            want = math.exp(-0.5 * (x * x / 1.3**2 + y * y / 0.7**2)) / (2 * math.pi)
            assert got == pytest.approx(want, rel=1e-12)

    def test_matches_quadrature_oracle(self, rng):
        # The formula integrates the half whose plane normal has n3 > 0, so
        # the corresponding raw quadrature config flips the normal when n3 is
        # negative; constant between the two: (2 pi)^(3/2) / 2.
        scale = (2.0 * math.pi) ** 1.5 / 2.0
        for _ in range(40):
            sx, sy, sz = rng.uniform(0.4, 1.8, 3)
            n = random_unit(rng)
            if abs(n[2]) < 1e-3:
                continue
            x, y = rng.uniform(-1.5, 1.5, 2)
            got = general_sigma_integral(x, y, sx, sy, sz, n) * scale
            cov = np.diag([sx * sx, sy * sy, sz * sz])
            want = oracle_line_integral(
                [0, 0, 0], cov, n * np.sign(n[2]), 1.0, 0.0,
                [x, y, -30.0], [0, 0, 1],
            )
            assert got == pytest.approx(want, rel=1e-6, abs=1e-9)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            general_sigma_integral(0, 0, -1, 1, 1, [0, 0, 1])
        with pytest.raises(ValueError):
            general_sigma_integral(0, 0, 1, 1, 1, [1, 0, 1e-9])
