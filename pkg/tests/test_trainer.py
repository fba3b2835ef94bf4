import numpy as np
import pytest

from halfsplat.errors import EmptyScene, NonFiniteLoss
from halfsplat.geometry import Scene, logit, sigmoid
from halfsplat.rasterizer import render
from halfsplat.trainer import (
    AdamState,
    DensifyStats,
    TrainConfig,
    Trainer,
    camera_extent,
    densify_and_prune,
    mu_learning_rate,
    opacity_disparity,
    reset_opacity,
    step,
)

from conftest import identity_camera, look_at_camera
from test_rasterizer import make_scene


def small_config(**kw):
    base = dict(total_iters=200, densify_until=100, densify_interval=50,
                opacity_reset_start=1000, opacity_reset_interval=1000,
                opacity_reset_until=1000, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(scene):
    return {name: getattr(scene, name).copy() for name in
            ("mu", "log_scale", "rotation", "sh_coeffs", "normal",
             "raw_opacity_a", "raw_opacity_b")}


def assert_bit_identical(snap, scene, names):
    for name in names:
        assert np.array_equal(snap[name], getattr(scene, name)), name


class TestStep:
    def test_zero_gradient_leaves_parameters_unchanged(self, rng):
        scene = make_scene(rng, 4)
        cam = identity_camera(32, 32)
        target = render(scene, cam).color  # perfect fit: L1 gradient is zero
        cfg = small_config(lambda_ssim=0.0)
        opt = AdamState(scene)
        snap = snapshot(scene)
        step(scene, (cam, target), cfg, opt, 1)
        assert_bit_identical(snap, scene, snap.keys())

    def test_selective_mode_freezes_groups(self, rng):
        scene = make_scene(rng, 5)
        cam = identity_camera(32, 32)
        target = np.clip(render(scene, cam).color + 0.1, 0, 1)
        cfg = small_config(mode="finetune_normals_opacities")
        opt = AdamState(scene)
        snap = snapshot(scene)
        for it in range(1, 4):
            step(scene, (cam, target), cfg, opt, it)
        assert_bit_identical(snap, scene, ("mu", "log_scale", "rotation", "sh_coeffs"))
        assert not np.array_equal(snap["raw_opacity_a"], scene.raw_opacity_a)

    def test_lr_normal_zero_keeps_normals_bit_identical(self, rng):
        scene = make_scene(rng, 5)
        cam = identity_camera(32, 32)
        target = np.clip(render(scene, cam).color + 0.1, 0, 1)
        cfg = small_config(lr_normal=0.0)
        opt = AdamState(scene)
        snap = snapshot(scene)
        for it in range(1, 6):
            step(scene, (cam, target), cfg, opt, it)
        assert np.array_equal(snap["normal"], scene.normal)
        assert not np.array_equal(snap["mu"], scene.mu)

    def test_nonfinite_loss_raises(self, rng):
        scene = make_scene(rng, 3)
        cam = identity_camera(32, 32)
        target = np.full((32, 32, 3), np.nan)
        with pytest.raises(NonFiniteLoss):
            step(scene, (cam, target), small_config(), AdamState(scene), 7)

    def test_convergence_smoke(self):
        # single primitive against a fixed target: best-so-far loss decreases
        rng = np.random.default_rng(5)
        scene = make_scene(rng, 1, spread=0.05)
        cam = identity_camera(24, 24, focal=30)
        target = np.full((24, 24, 3), 0.6)
        cfg = small_config(lambda_ssim=0.0)
        opt = AdamState(scene)
        losses = [step(scene, (cam, target), cfg, opt, it)[0]
                  for it in range(1, 201)]
        assert min(losses[-20:]) < losses[0] * 0.7

    def test_full_kernel_keeps_opacities_tied(self, rng):
        scene = make_scene(rng, 4)
        scene.raw_opacity_b = scene.raw_opacity_a.copy()
        cam = identity_camera(32, 32)
        target = np.clip(render(scene, cam).color + 0.05, 0, 1)
        cfg = small_config(kernel="full")
        opt = AdamState(scene)
        for it in range(1, 5):
            step(scene, (cam, target), cfg, opt, it)
        assert np.array_equal(scene.raw_opacity_a, scene.raw_opacity_b)


class TestDensify:
    def test_noop_when_gradients_low(self, rng):
        scene = make_scene(rng, 6)
        stats = DensifyStats.zeros(6)
        cfg = small_config()
        opt = AdamState(scene)
        new_scene, _, report = densify_and_prune(
            scene, stats, cfg, opt, np.random.default_rng(0), 10.0)
        assert report == {"cloned": 0, "split": 0, "pruned": 0}
        assert len(new_scene) == 6
        assert np.array_equal(new_scene.mu, scene.mu)

    def test_prunes_low_opacity(self, rng):
        scene = make_scene(rng, 4)
        scene.raw_opacity_a[2] = logit(0.001)
        scene.raw_opacity_b[2] = logit(0.002)
        stats = DensifyStats.zeros(4)
        opt = AdamState(scene)
        new_scene, _, report = densify_and_prune(
            scene, stats, small_config(), opt, np.random.default_rng(0), 10.0)
        assert report["pruned"] == 1
        assert len(new_scene) == 3
        assert opt.m["mu"].shape[0] == 3

    def test_split_shrinks_children_and_keeps_opacities(self, rng):
        scene = make_scene(rng, 3)
        scene.log_scale[1] = np.log(0.5)  # large against extent 1.0
        stats = DensifyStats.zeros(3)
        stats.grad_sum[1] = 10.0
        stats.count[1] = 1
        opt = AdamState(scene)
        cfg = small_config()
        new_scene, _, report = densify_and_prune(
            scene, stats, cfg, opt, np.random.default_rng(0), 10.0)
        assert report["split"] == 1
        assert len(new_scene) == 4  # parent replaced by two children
        children = new_scene.log_scale[-2:]
        assert np.allclose(children, np.log(0.5) - np.log(1.6))
        assert np.allclose(new_scene.raw_opacity_a[-2:], scene.raw_opacity_a[1])
        assert np.allclose(new_scene.raw_opacity_b[-2:], scene.raw_opacity_b[1])
        assert np.allclose(new_scene.normal[-2:], np.broadcast_to(scene.normal[1], (2, 3)))

    def test_clone_small_high_gradient(self, rng):
        scene = make_scene(rng, 3)
        scene.log_scale[:] = np.log(0.004)
        stats = DensifyStats.zeros(3)
        stats.grad_sum[0] = 5.0
        stats.mu_grad_sum[0] = [1.0, 0.0, 0.0]
        stats.count[0] = 1
        opt = AdamState(scene)
        new_scene, _, report = densify_and_prune(
            scene, stats, small_config(), opt, np.random.default_rng(0), 10.0)
        assert report["cloned"] == 1
        assert len(new_scene) == 4
        # shifted along the negative accumulated gradient
        assert new_scene.mu[-1, 0] < scene.mu[0, 0]

    def test_budget_cap(self, rng):
        scene = make_scene(rng, 4)
        stats = DensifyStats.zeros(4)
        stats.grad_sum[:] = 5.0
        stats.count[:] = 1
        scene.log_scale[:] = np.log(0.004)  # all clone candidates
        opt = AdamState(scene)
        cfg = small_config(max_primitives=5)
        new_scene, _, report = densify_and_prune(
            scene, stats, cfg, opt, np.random.default_rng(0), 10.0)
        assert len(new_scene) == 5
        assert report["cloned"] == 1


class TestResetAndDisparity:
    def test_reset_clamps_both(self, rng):
        scene = make_scene(rng, 3)
        scene.raw_opacity_a[0] = logit(0.9)
        scene.raw_opacity_b[0] = logit(0.3)
        scene.raw_opacity_a[1] = logit(0.005)
        before = scene.raw_opacity_a[1]
        reset_opacity(scene, ceiling=0.01)
        a1, a2 = scene.alphas()
        assert a1.max() <= 0.01 + 1e-12
        assert a2.max() <= 0.01 + 1e-12
        assert scene.raw_opacity_a[1] == before  # already below the ceiling

    def test_render_after_reset_alpha_bound(self, rng):
        scene = make_scene(rng, 8)
        reset_opacity(scene, ceiling=0.01)
        out = render(scene, identity_camera(32, 32))
        bound = 1.0 - (1.0 - 0.01) ** 8
        assert out.alpha.max() <= bound + 1e-9

    def test_disparity_arithmetic(self, rng):
        scene = make_scene(rng, 2)
        scene.raw_opacity_a[:] = logit(np.array([0.5, 0.7]))
        scene.raw_opacity_b[:] = logit(np.array([0.3, 0.3]))
        assert opacity_disparity(scene) == pytest.approx(0.3)
        scene.raw_opacity_b = scene.raw_opacity_a.copy()
        assert opacity_disparity(scene) == 0.0

    def test_disparity_empty(self):
        empty = Scene(
            mu=np.zeros((0, 3)), log_scale=np.zeros((0, 3)),
            rotation=np.zeros((0, 4)), sh_coeffs=np.zeros((0, 1, 3)),
            normal=np.zeros((0, 3)), raw_opacity_a=np.zeros(0),
            raw_opacity_b=np.zeros(0), sh_degree=0,
        )
        with pytest.raises(EmptyScene):
            opacity_disparity(empty)


class TestTrainerLoop:
    def _views(self, rng, scene, n=2, size=24):
        views = []
        for i in range(n):
            cam = look_at_camera([3.0 * i - 1.5, 0.1, -0.6], [0, 0, 3.0],
                                 width=size, height=size, focal=28)
            views.append((f"v{i}", cam, render(scene, cam).color * 0.9))
        return views

    def test_schedule_events_in_metrics(self, rng):
        scene = make_scene(rng, 4)
        views = self._views(rng, scene)
        cfg = TrainConfig(total_iters=130, densify_until=100,
                          densify_interval=50, opacity_reset_start=60,
                          opacity_reset_interval=60, opacity_reset_until=130,
                          seed=1)
        trainer = Trainer(scene.copy(), views, cfg)
        trainer.run()
        rows = trainer.metrics_rows
        densify_iters = [r["iteration"] for r in rows
                         if r["cloned"] + r["split"] + r["pruned"] >= 0
                         and r["iteration"] % 50 == 0 and r["iteration"] < 100]
        assert densify_iters == [50]
        reset_iters = [r["iteration"] for r in rows if r["opacity_reset"]]
        assert reset_iters == [60, 120]

    def test_reproducible_bit_identical(self, rng):
        scene = make_scene(rng, 5)
        views = self._views(rng, scene)
        cfg = TrainConfig(total_iters=40, densify_until=30, densify_interval=10,
                          opacity_reset_start=25, opacity_reset_interval=25,
                          opacity_reset_until=30, seed=7)
        a = Trainer(scene.copy(), views, cfg).run()
        b = Trainer(scene.copy(), views, cfg).run()
        for name in ("mu", "log_scale", "rotation", "sh_coeffs", "normal",
                     "raw_opacity_a", "raw_opacity_b"):
            assert np.array_equal(getattr(a, name), getattr(b, name)), name

    def test_lr_zero_equals_frozen_run(self, rng):
        scene = make_scene(rng, 4)
        views = self._views(rng, scene)
        cfg0 = TrainConfig(total_iters=30, densify_until=20, densify_interval=100,
                           opacity_reset_start=100, opacity_reset_interval=100,
                           opacity_reset_until=100, seed=3, lr_normal=0.0)
        a = Trainer(scene.copy(), views, cfg0).run()
        assert np.array_equal(a.normal, scene.normal)

    def test_extent_helper(self):
        cams = [identity_camera(), look_at_camera([2, 0, 0], [0, 0, 3])]
        assert camera_extent(cams) > 0
        assert camera_extent([identity_camera()]) == 1.0

    def test_mu_lr_schedule(self):
        cfg = TrainConfig(seed=0)
        assert mu_learning_rate(cfg, 0, 1.0) == pytest.approx(1.6e-4)
        assert mu_learning_rate(cfg, 30000, 1.0) == pytest.approx(1.6e-6)
        mid = mu_learning_rate(cfg, 15000, 1.0)
        assert 1.6e-6 < mid < 1.6e-4


class TestConfigValidation:
    def test_bad_schedule(self):
        with pytest.raises(ValueError):
            TrainConfig(total_iters=100, densify_until=200)

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            TrainConfig(lambda_ssim=1.5)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            TrainConfig(mode="warp_speed")
