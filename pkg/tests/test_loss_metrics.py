import math

import numpy as np
import pytest

from halfsplat.errors import ImageTooSmall, ShapeMismatch
from halfsplat.loss import compute_loss, ssim, ssim_with_grad
from halfsplat.metrics import EvalReport, psnr


def textured(rng, h=32, w=32):
    ys, xs = np.mgrid[0:h, 0:w]
    base = 0.5 + 0.25 * np.sin(xs / 3.0) * np.cos(ys / 5.0)
    img = np.stack([base, base ** 2, 1 - base], axis=-1)
    return np.clip(img + rng.normal(scale=0.05, size=img.shape), 0.02, 0.98)


class TestPsnr:
    def test_identical_is_inf(self, rng):
        a = textured(rng)
        assert psnr(a, a) == math.inf

    def test_constant_offset(self, rng):
        a = np.full((16, 16, 3), 0.4)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_against_direct_sum_oracle(self, rng):
        a, b = textured(rng), textured(rng)
        total = 0.0
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                for c in range(3):
                    total += (a[i, j, c] - b[i, j, c]) ** 2
        want = 10 * math.log10(1.0 / (total / a.size))
        assert psnr(a, b) == pytest.approx(want, abs=1e-9)

    def test_symmetry(self, rng):
        a, b = textured(rng), textured(rng)
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def naive_ssim(a, b):
    """Direct per-window double-loop oracle replicating zero padding."""
    from halfsplat.loss import SSIM_C1, SSIM_C2, _window

    w1 = _window()
    win = np.outer(w1, w1)
    half = len(w1) // 2
    total = 0.0
    count = 0
    for c in range(a.shape[2]):
        x = np.pad(a[..., c], half)
        y = np.pad(b[..., c], half)
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                px = x[i:i + 11, j:j + 11]
                py = y[i:i + 11, j:j + 11]
                m1 = (win * px).sum()
                m2 = (win * py).sum()
                s1 = (win * px * px).sum() - m1 * m1
                s2 = (win * py * py).sum() - m2 * m2
                s12 = (win * px * py).sum() - m1 * m2
                total += ((2 * m1 * m2 + SSIM_C1) * (2 * s12 + SSIM_C2)) / (
                    (m1 * m1 + m2 * m2 + SSIM_C1) * (s1 + s2 + SSIM_C2))
                count += 1
    return total / count


class TestSsim:
    def test_self_similarity_is_exactly_one(self, rng):
        a = textured(rng)
        assert ssim(a, a) == 1.0

    def test_matches_naive_oracle(self, rng):
        a, b = textured(rng, 20, 24), textured(rng, 20, 24)
        assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-12)

    def test_inverted_image_scores_low(self, rng):
        a = textured(rng)
        assert ssim(a, 1.0 - a) < 0.2

    def test_symmetry(self, rng):
        a, b = textured(rng), textured(rng)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_luminance_stabilizer_effect(self, rng):
        # against the same expression with (near-)zero stabilizers: the
        # stabilized score forgives a brightness shift more
        from halfsplat import loss as L

        a = textured(rng)
        b = np.clip(a + 0.05, 0, 1)
        stabilized = ssim(a, b)
        saved = (L.SSIM_C1, L.SSIM_C2)
        try:
            L.SSIM_C1, L.SSIM_C2 = 1e-12, 1e-12
            plain = ssim(a, b)
        finally:
            L.SSIM_C1, L.SSIM_C2 = saved
        assert stabilized > plain

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestComputeLoss:
    def test_identical_is_zero(self, rng):
        a = textured(rng)
        loss, grad = compute_loss(a, a, 0.2)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1_constant_offset(self, rng):
        a = textured(rng) * 0.5 + 0.2
        loss, _ = compute_loss(a + 0.1, a, lambda_ssim=0.0)
        assert loss == pytest.approx(0.1, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        a = textured(rng, 16, 16)
        b = textured(rng, 16, 16)
        _, grad = compute_loss(a, b, 0.2)
        h = 1e-6
        idx = [(0, 0, 0), (7, 9, 1), (15, 15, 2), (3, 12, 0), (8, 8, 2)]
        for i, j, c in idx:
            ap = a.copy()
            ap[i, j, c] += h
            am = a.copy()
            am[i, j, c] -= h
            fd = (compute_loss(ap, b, 0.2)[0] - compute_loss(am, b, 0.2)[0]) / (2 * h)
            assert grad[i, j, c] == pytest.approx(fd, rel=1e-3, abs=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            compute_loss(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)), 0.2)


class TestEvalReport:
    def test_means_are_arithmetic_averages(self):
        rep = EvalReport(primitive_count=10)
        rep.add("a.png", 30.0, 0.9, 5.0)
        rep.add("b.png", 34.0, 0.8, 7.0)
        assert rep.mean_psnr == pytest.approx(32.0)
        assert rep.mean_ssim == pytest.approx(0.85)
        csv_text = rep.to_csv()
        assert "a.png" in csv_text and "mean" in csv_text
        assert "primitive_count,10" in csv_text
        assert "10" in rep.format_table()
