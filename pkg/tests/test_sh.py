import numpy as np
import pytest

from halfsplat.sh import eval_color, eval_sh_basis, eval_sh_basis_grad

from conftest import random_unit


def test_degree0_constant(rng):
    for _ in range(10):
        vals = eval_sh_basis(random_unit(rng), 0)
        assert np.array_equal(vals, [0.28209479177387814])


def test_band1_ordering_at_z():
    vals = eval_sh_basis([0.0, 0.0, 1.0], 1)
    assert np.allclose(vals[1:], [0.0, 0.4886025119029199, 0.0])


def test_orthonormality_monte_carlo():
    # 4 pi * E[basis_i * basis_j] over the uniform sphere approximates the
    # identity; Monte-Carlo oracle for the hard-coded constants
    rng = np.random.default_rng(123)
    dirs = random_unit(rng, 1_000_000)
    basis = eval_sh_basis(dirs, 3)
    gram = 4.0 * np.pi * (basis.T @ basis) / dirs.shape[0]
    assert np.abs(gram - np.eye(16)).max() < 0.02


def test_eval_color_dc_offset(rng):
    coeffs = np.zeros((1, 3))
    assert np.allclose(eval_color(coeffs, random_unit(rng)), [0.5, 0.5, 0.5])


def test_eval_color_dc_inversion():
    g = 0.25
    coeffs = np.full((1, 3), g) / 0.28209479177387814
    assert np.allclose(eval_color(coeffs, [0, 0, 1]), [0.75, 0.75, 0.75])


def test_band1_odd_parity(rng):
    coeffs = rng.normal(size=(4, 3))
    d = random_unit(rng)
    assert not np.allclose(eval_color(coeffs, d), eval_color(coeffs, -d))
    coeffs[1:] = 0.0
    assert np.allclose(eval_color(coeffs, d), eval_color(coeffs, -d))


def test_gradient_wrt_coefficients_is_basis(rng):
    # linear model: exact equality away from the clamp
    d = random_unit(rng)
    for degree in range(4):
        k = (degree + 1) ** 2
        coeffs = np.zeros((k, 3))
        base = eval_color(coeffs, d)
        assert np.allclose(base, 0.5)
        basis = eval_sh_basis(d, degree)
        for i in range(k):
            step = np.zeros((k, 3))
            step[i, 0] = 1e-3
            bumped = eval_color(coeffs + step, d)
            assert (bumped[0] - 0.5) == pytest.approx(1e-3 * basis[i], rel=1e-9, abs=1e-15)


def test_basis_grad_matches_fd(rng):
    h = 1e-6
    for degree in range(4):
        for _ in range(5):
            d = rng.normal(size=3)  # grad is defined on raw components
            grad = eval_sh_basis_grad(d, degree)
            for k in range(3):
                dp = np.zeros(3)
                dp[k] = h
                fd = (eval_sh_basis(d + dp, degree) - eval_sh_basis(d - dp, degree)) / (2 * h)
                assert np.allclose(grad[:, k], fd, atol=1e-6)


def test_color_floor_at_zero():
    coeffs = np.full((1, 3), -10.0)
    assert np.array_equal(eval_color(coeffs, [0, 0, 1]), [0.0, 0.0, 0.0])
