"""Optimization loop: loss, adaptive updates, density control, schedules.

One iteration renders a single training view, computes the L1+SSIM loss,
backpropagates through the rasterizer, and applies per-group Adam updates.
Growth (clone/split) and pruning run every ``densify_interval`` iterations
until ``densify_until``; opacity resets follow their own schedule.  All
randomness (view order, split sampling) flows from one seeded generator, so
a fixed seed reproduces the final scene bit-for-bit.
"""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyScene, NonFiniteLoss
from .geometry import Scene, logit, quat_to_rot, sigmoid
from .loss import compute_loss
from .metrics import psnr
from .rasterizer import render, render_backward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

MODES = ("from_scratch", "finetune_all", "finetune_all_with_densify",
         "finetune_normals_opacities")


@dataclass
class TrainConfig:
    total_iters: int = 30000
    densify_until: int = 20000
    densify_interval: int = 100
    opacity_reset_start: int = 3000
    opacity_reset_interval: int = 3000
    opacity_reset_until: int = 20000
    opacity_reset_ceiling: float = 0.01
    lambda_ssim: float = 0.2
    lr_normal: float = 0.003
    lr_mu_init: float = 1.6e-4
    lr_mu_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_sh_dc: float = 2.5e-3
    sh_rest_divisor: float = 20.0
    lr_opacity: float = 5e-2
    densify_grad_threshold: float = 2e-4
    prune_opacity_threshold: float = 0.005
    percent_dense: float = 0.01
    prune_extent_factor: float = 0.1
    split_scale_factor: float = 1.6
    max_primitives: int = 0          # 0 = unlimited
    mode: str = "from_scratch"
    kernel: str = "half"             # "full" trains the alpha-tied baseline
    seed: int = 0
    threads: int = 0                 # 0 = rasterizer default
    checkpoint_interval: int = 0     # 0 = final checkpoint only

    def __post_init__(self):
        if not (0 < self.densify_until <= self.total_iters):
            raise ValueError("require 0 < densify_until <= total_iters")
        if not (0.0 <= self.lambda_ssim <= 1.0):
            raise ValueError("lambda_ssim must lie in [0, 1]")
        for name in ("lr_mu_init", "lr_mu_final", "lr_scale", "lr_rotation",
                     "lr_sh_dc", "lr_opacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        # lr_normal may be zero: that freezes the splitting planes
        if self.lr_normal < 0:
            raise ValueError("lr_normal must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.kernel not in ("half", "full"):
            raise ValueError("kernel must be 'half' or 'full'")


# parameter groups: name -> (scene attribute, index expression)
GROUPS = ("mu", "log_scale", "rotation", "sh_dc", "sh_rest", "normal",
          "opacity_a", "opacity_b")


def _group_ref(scene, name):
    return {
        "mu": scene.mu,
        "log_scale": scene.log_scale,
        "rotation": scene.rotation,
        "sh_dc": scene.sh_coeffs[:, :1, :],
        "sh_rest": scene.sh_coeffs[:, 1:, :],
        "normal": scene.normal,
        "opacity_a": scene.raw_opacity_a,
        "opacity_b": scene.raw_opacity_b,
    }[name]


def _group_grad(grads, name):
    return {
        "mu": grads.d_mu,
        "log_scale": grads.d_log_scale,
        "rotation": grads.d_rotation,
        "sh_dc": grads.d_sh[:, :1, :],
        "sh_rest": grads.d_sh[:, 1:, :],
        "normal": grads.d_normal,
        "opacity_a": grads.d_raw_opacity_a,
        "opacity_b": grads.d_raw_opacity_b,
    }[name]


class AdamState:
    """First/second moments per parameter group, row-aligned with the scene."""

    def __init__(self, scene):
        self.m = {}
        self.v = {}
        self.t = {name: 0 for name in GROUPS}
        for name in GROUPS:
            ref = _group_ref(scene, name)
            self.m[name] = np.zeros_like(ref)
            self.v[name] = np.zeros_like(ref)

    def select(self, keep):
        for name in GROUPS:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]

    def append_zeros(self, count):
        for name in GROUPS:
            pad = np.zeros((count,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad])

    def zero_group(self, name):
        self.m[name][:] = 0.0
        self.v[name][:] = 0.0
        self.t[name] = 0


def mu_learning_rate(config, iteration, spatial_scale):
    """Exponential decay from lr_mu_init to lr_mu_final over the whole run."""
    frac = min(max(iteration / config.total_iters, 0.0), 1.0)
    lr = config.lr_mu_init * (config.lr_mu_final / config.lr_mu_init) ** frac
    return lr * spatial_scale


def learning_rates(config, iteration, spatial_scale):
    return {
        "mu": mu_learning_rate(config, iteration, spatial_scale),
        "log_scale": config.lr_scale,
        "rotation": config.lr_rotation,
        "sh_dc": config.lr_sh_dc,
        "sh_rest": config.lr_sh_dc / config.sh_rest_divisor,
        "normal": config.lr_normal,
        "opacity_a": config.lr_opacity,
        "opacity_b": config.lr_opacity,
    }


def active_groups(config):
    if config.mode == "finetune_normals_opacities":
        groups = {"normal", "opacity_a", "opacity_b"}
    else:
        groups = set(GROUPS)
    if config.kernel == "full":
        groups.discard("normal")
    return groups


def camera_extent(cameras):
    """Radius of the camera-center bounding sphere (3D-GS style)."""
    centers = np.stack([cam.center for cam in cameras])
    if centers.shape[0] < 2:
        return 1.0
    centroid = centers.mean(axis=0)
    radius = np.linalg.norm(centers - centroid, axis=1).max()
    return float(radius) if radius > 0 else 1.0


def step(scene, batch_view, config, opt_state, iteration, spatial_scale=1.0,
         threads=None):
    """One optimization step on a single (camera, target image) pair.

    Returns (loss, grads).  Parameters with exactly zero update stay
    bit-identical; frozen groups are skipped entirely.
    """
    cam, target = batch_view
    out = render(scene, cam, kernel=config.kernel, threads=threads)
    loss, d_color = compute_loss(out.color, target, config.lambda_ssim)
    if not math.isfinite(loss):
        raise NonFiniteLoss(iteration, loss)
    grads = render_backward(scene, cam, out, d_color, threads=threads)

    lrs = learning_rates(config, iteration, spatial_scale)
    enabled = active_groups(config)
    for name in GROUPS:
        if name not in enabled:
            continue
        lr = lrs[name]
        if lr == 0.0:
            continue
        g = _group_grad(grads, name)
        opt_state.t[name] += 1
        t = opt_state.t[name]
        m = opt_state.m[name]
        v = opt_state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        update = lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        ref = _group_ref(scene, name)
        ref -= update
        if name == "normal":
            # keep unit length, but only where the update moved the normal,
            # so zero-gradient primitives stay bit-identical
            moved = np.any(update != 0.0, axis=1)
            if moved.any():
                norms = np.linalg.norm(scene.normal[moved], axis=1, keepdims=True)
                norms[norms == 0.0] = 1.0
                scene.normal[moved] /= norms
    if config.kernel == "full":
        # tied opacities: the halves share one learned value
        scene.raw_opacity_b[:] = scene.raw_opacity_a
    return loss, grads, out


@dataclass
class DensifyStats:
    """Accumulated screen-space gradient statistics between densify events."""

    grad_sum: np.ndarray
    mu_grad_sum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros((n, 3)), np.zeros(n, dtype=np.int64))

    def update(self, grads):
        self.grad_sum += grads.pos_grad_norm
        self.mu_grad_sum += grads.d_mu
        self.count += grads.touch_count


def densify_and_prune(scene, stats, config, opt_state, rng, scene_extent):
    """Clone small / split large high-gradient primitives, prune weak ones.

    Returns (scene, stats, report); the optimizer state is re-aligned with
    the surviving rows (new primitives start with zero moments).
    """
    n = len(scene)
    avg = np.where(stats.count > 0, stats.grad_sum / np.maximum(stats.count, 1), 0.0)
    a1, a2 = scene.alphas()
    max_scale = np.exp(scene.log_scale).max(axis=1)

    prune = (np.maximum(a1, a2) < config.prune_opacity_threshold) | (
        max_scale > config.prune_extent_factor * scene_extent
    )
    dense_limit = config.percent_dense * scene_extent
    hot = (avg >= config.densify_grad_threshold) & ~prune
    clone = hot & (max_scale <= dense_limit)
    split = hot & (max_scale > dense_limit)

    survivors = ~prune & ~split
    budget = math.inf
    if config.max_primitives > 0:
        # survivors plus split parents (2 children replace 1 parent)
        base = int(survivors.sum()) + int(split.sum())
        budget = max(0, config.max_primitives - base)

    clone_idx = []
    split_idx = []
    for i in np.nonzero(clone)[0]:
        if budget >= 1:
            clone_idx.append(i)
            budget -= 1
    for i in np.nonzero(split)[0]:
        if budget >= 1:
            split_idx.append(i)
            budget -= 1
        else:
            survivors[i] = True  # over budget: keep the parent unsplit
            split[i] = False
    clone_idx = np.asarray(clone_idx, dtype=np.int64)
    split_idx = np.asarray(split_idx, dtype=np.int64)

    keep = np.nonzero(survivors)[0]
    parts = {name: [getattr(scene, name)[keep]] for name in
             ("mu", "log_scale", "rotation", "sh_coeffs", "normal",
              "raw_opacity_a", "raw_opacity_b")}

    new_rows = 0
    if clone_idx.size:
        # copy shifted a small step down the accumulated position gradient
        g = stats.mu_grad_sum[clone_idx]
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(norms > 0, g / np.where(norms > 0, norms, 1.0), 0.0)
        step_size = 0.1 * np.exp(scene.log_scale[clone_idx].mean(axis=1))
        parts["mu"].append(scene.mu[clone_idx] - direction * step_size[:, None])
        for name in ("log_scale", "rotation", "sh_coeffs", "normal",
                     "raw_opacity_a", "raw_opacity_b"):
            parts[name].append(getattr(scene, name)[clone_idx])
        new_rows += clone_idx.size
    if split_idx.size:
        # two children per parent, scale shrunk, position drawn from the
        # parent Gaussian; normal and both opacities inherited verbatim
        for _ in range(2):
            offsets = rng.normal(size=(split_idx.size, 3))
            rot = quat_to_rot(scene.rotation[split_idx])
            scaled = offsets * np.exp(scene.log_scale[split_idx])
            world = np.einsum("nab,nb->na", rot, scaled)
            parts["mu"].append(scene.mu[split_idx] + world)
            parts["log_scale"].append(
                scene.log_scale[split_idx] - np.log(config.split_scale_factor))
            for name in ("rotation", "sh_coeffs", "normal",
                         "raw_opacity_a", "raw_opacity_b"):
                parts[name].append(getattr(scene, name)[split_idx])
        new_rows += 2 * split_idx.size

    new_scene = Scene(
        mu=np.concatenate(parts["mu"]),
        log_scale=np.concatenate(parts["log_scale"]),
        rotation=np.concatenate(parts["rotation"]),
        sh_coeffs=np.concatenate(parts["sh_coeffs"]),
        normal=np.concatenate(parts["normal"]),
        raw_opacity_a=np.concatenate(parts["raw_opacity_a"]),
        raw_opacity_b=np.concatenate(parts["raw_opacity_b"]),
        sh_degree=scene.sh_degree,
        background_color=scene.background_color,
    )
    opt_state.select(keep)
    opt_state.append_zeros(new_rows)
    report = {
        "cloned": int(clone_idx.size),
        "split": int(split_idx.size),
        "pruned": int(prune.sum()),
    }
    return new_scene, DensifyStats.zeros(len(new_scene)), report


def reset_opacity(scene, opt_state=None, ceiling=0.01):
    """Clamp both opacity logits so sigmoid <= ceiling; others untouched."""
    cap = logit(ceiling)
    np.minimum(scene.raw_opacity_a, cap, out=scene.raw_opacity_a)
    np.minimum(scene.raw_opacity_b, cap, out=scene.raw_opacity_b)
    if opt_state is not None:
        opt_state.zero_group("opacity_a")
        opt_state.zero_group("opacity_b")


def opacity_disparity(scene):
    """Mean |alpha1 - alpha2| over the scene."""
    if len(scene) == 0:
        raise EmptyScene("opacity_disparity of an empty scene")
    a1, a2 = scene.alphas()
    return float(np.abs(a1 - a2).mean())


METRICS_FIELDS = ("iteration", "loss", "psnr", "num_primitives",
                  "opacity_disparity", "cloned", "split", "pruned",
                  "opacity_reset")


class Trainer:
    """Drives the full schedule over a fixed set of training views."""

    def __init__(self, scene, views, config, metrics_path=None,
                 checkpoint_fn=None):
        self.scene = scene
        self.views = list(views)  # (name, CameraModel, target image)
        if not self.views:
            raise ValueError("need at least one training view")
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.opt = AdamState(scene)
        self.stats = DensifyStats.zeros(len(scene))
        self.spatial_scale = camera_extent([v[1] for v in self.views])
        self.metrics_path = metrics_path
        self.checkpoint_fn = checkpoint_fn
        self._metrics_rows = []
        self._order = []

    def _next_view(self):
        if not self._order:
            self._order = list(self.rng.permutation(len(self.views)))
        return self.views[self._order.pop()]

    def densify_enabled(self):
        return self.config.mode in ("from_scratch", "finetune_all_with_densify")

    def run(self, progress=None):
        cfg = self.config
        threads = cfg.threads if cfg.threads > 0 else None
        for iteration in range(1, cfg.total_iters + 1):
            name, cam, target = self._next_view()
            loss, grads, out = step(
                self.scene, (cam, target), cfg, self.opt, iteration,
                self.spatial_scale, threads=threads,
            )
            self.stats.update(grads)

            report = {"cloned": 0, "split": 0, "pruned": 0}
            did_reset = 0
            if (self.densify_enabled() and iteration % cfg.densify_interval == 0
                    and iteration < cfg.densify_until):
                self.scene, self.stats, report = densify_and_prune(
                    self.scene, self.stats, cfg, self.opt, self.rng,
                    self.spatial_scale,
                )
            if (cfg.opacity_reset_start <= iteration <= cfg.opacity_reset_until
                    and iteration % cfg.opacity_reset_interval == 0):
                reset_opacity(self.scene, self.opt, cfg.opacity_reset_ceiling)
                did_reset = 1

            row = {
                "iteration": iteration,
                "loss": loss,
                "psnr": psnr(out.color, target),
                "num_primitives": len(self.scene),
                "opacity_disparity": opacity_disparity(self.scene),
                "cloned": report["cloned"],
                "split": report["split"],
                "pruned": report["pruned"],
                "opacity_reset": did_reset,
            }
            self._metrics_rows.append(row)
            if progress and iteration % progress == 0:
                print(f"iter {iteration:>6}  loss {loss:.5f}  "
                      f"prims {len(self.scene)}")
            if (self.checkpoint_fn and cfg.checkpoint_interval
                    and iteration % cfg.checkpoint_interval == 0):
                self.checkpoint_fn(self.scene, iteration)
        if self.metrics_path:
            self.write_metrics(self.metrics_path)
        if self.checkpoint_fn:
            self.checkpoint_fn(self.scene, cfg.total_iters)
        return self.scene

    def write_metrics(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
            writer.writeheader()
            writer.writerows(self._metrics_rows)

    @property
    def metrics_rows(self):
        return self._metrics_rows
