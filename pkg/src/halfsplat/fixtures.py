"""Procedural fixture datasets: no downloads, fully deterministic.

Three scenes sized for desk-scale training runs:

  * ``edge``   - a checker-textured quad floating in front of a gray
                 background; silhouette and texture boundaries everywhere.
  * ``corner`` - two perpendicular textured faces meeting along an edge
                 (an open book seen from outside).
  * ``sphere`` - a Lambertian sphere with a latitude band texture.

Targets are ray-traced analytically (3x3 supersampling), so the ground
truth is independent of the splatting renderer.  ``make_dataset`` writes a
directory with images/, cameras.json, and points.ply that the CLI can train
on; ``build_fixture`` returns the same content in memory.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from .geometry import CameraModel

EDGE_COLOR_A = np.array([0.85, 0.12, 0.10])
EDGE_COLOR_B = np.array([0.10, 0.18, 0.85])
CORNER_COLOR_A = np.array([0.9, 0.75, 0.1])
CORNER_COLOR_B = np.array([0.12, 0.65, 0.25])
BACKGROUND = np.array([0.25, 0.25, 0.28])
LIGHT_DIR = np.array([0.45, -0.65, -0.6]) / np.linalg.norm([0.45, -0.65, -0.6])

SCENES = ("edge", "corner", "sphere")


def _checker(u, v, tiles, color_a, color_b):
    ci = (np.floor(u * tiles).astype(int) + np.floor(v * tiles).astype(int)) % 2
    return np.where(ci[..., None] == 0, color_a, color_b)


def _edge_trace(origins, dirs):
    """Quad x,y in [-1,1] at z=0, 4x4 checker; rays from the -z side."""
    shape = dirs.shape[:-1]
    color = np.broadcast_to(BACKGROUND, shape + (3,)).copy()
    dz = dirs[..., 2]
    hit = np.abs(dz) > 1e-9
    t = np.where(hit, -origins[..., 2] / np.where(hit, dz, 1.0), np.inf)
    px = origins[..., 0] + t * dirs[..., 0]
    py = origins[..., 1] + t * dirs[..., 1]
    on_quad = hit & (t > 0) & (np.abs(px) <= 1.0) & (np.abs(py) <= 1.0)
    u = (px + 1.0) / 2.0
    v = (py + 1.0) / 2.0
    tex = _checker(u, v, 4, EDGE_COLOR_A, EDGE_COLOR_B)
    color[on_quad] = tex[on_quad]
    return color


def _corner_trace(origins, dirs):
    """Faces: z=0 with x in [-1,0], and x=0 with z in [0,1]; y in [-1,1]."""
    shape = dirs.shape[:-1]
    color = np.broadcast_to(BACKGROUND, shape + (3,)).copy()
    best_t = np.full(shape, np.inf)

    dz = dirs[..., 2]
    ok = np.abs(dz) > 1e-9
    t = np.where(ok, -origins[..., 2] / np.where(ok, dz, 1.0), np.inf)
    px = origins[..., 0] + t * dirs[..., 0]
    py = origins[..., 1] + t * dirs[..., 1]
    hit = ok & (t > 0) & (px >= -1.0) & (px <= 0.0) & (np.abs(py) <= 1.0)
    tex = _checker(-px, (py + 1.0) / 2.0, 4, CORNER_COLOR_A, EDGE_COLOR_B)
    sel = hit & (t < best_t)
    color[sel] = tex[sel]
    best_t = np.where(sel, t, best_t)

    dx = dirs[..., 0]
    ok = np.abs(dx) > 1e-9
    t = np.where(ok, -origins[..., 0] / np.where(ok, dx, 1.0), np.inf)
    pz = origins[..., 2] + t * dirs[..., 2]
    py = origins[..., 1] + t * dirs[..., 1]
    hit = ok & (t > 0) & (pz >= 0.0) & (pz <= 1.0) & (np.abs(py) <= 1.0)
    stripes = (np.floor(py * 3.0) % 2) == 0
    tex = np.where(stripes[..., None], CORNER_COLOR_B, EDGE_COLOR_A)
    sel = hit & (t < best_t)
    color[sel] = tex[sel]
    return color


def _sphere_trace(origins, dirs):
    """Lambertian sphere, radius 0.8 at the origin, banded albedo."""
    shape = dirs.shape[:-1]
    color = np.broadcast_to(BACKGROUND, shape + (3,)).copy()
    radius = 0.8
    b = np.einsum("...d,...d->...", origins, dirs)
    c = np.einsum("...d,...d->...", origins, origins) - radius * radius
    disc = b * b - c
    hit = disc > 0
    t = -b - np.sqrt(np.where(hit, disc, 0.0))
    hit &= t > 0
    pts = origins + t[..., None] * dirs
    n = pts / radius
    bands = (np.floor((n[..., 1] + 1.0) * 3.0) % 2) == 0
    albedo = np.where(bands[..., None], EDGE_COLOR_A, CORNER_COLOR_A)
    shade = 0.25 + 0.75 * np.maximum(0.0, -np.einsum("...d,d->...", n, LIGHT_DIR))
    lit = albedo * shade[..., None]
    color[hit] = lit[hit]
    return color


_TRACERS = {"edge": _edge_trace, "corner": _corner_trace, "sphere": _sphere_trace}


def render_target(scene_name, cam, supersample=3):
    """Analytic ground-truth image for one camera."""
    trace = _TRACERS[scene_name]
    h, w = cam.height, cam.width
    ss = supersample
    offs = (np.arange(ss) + 0.5) / ss
    rows = np.repeat(np.arange(h), ss) + np.tile(offs, h)
    cols = np.repeat(np.arange(w), ss) + np.tile(offs, w)
    px, py = np.meshgrid(cols, rows)
    rot_t = cam.rotation.T
    center = cam.center
    d_cam = np.stack([
        (px - cam.cx) / cam.fx,
        (py - cam.cy) / cam.fy,
        np.ones_like(px),
    ], axis=-1)
    d_world = d_cam @ rot_t.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(center, d_world.shape)
    img = trace(origins, d_world)
    img = img.reshape(h, ss, w, ss, 3).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def fixture_cameras(scene_name, size=64, focal=None):
    """3 train views + 1 held-out view per scene, deterministic poses."""
    focal = focal if focal is not None else size * 15 / 16
    if scene_name == "edge":
        target = (0.0, 0.0, 0.0)
        spots = [(-1.3, 0.25, -2.8, "train"), (0.0, -0.2, -3.0, "train"),
                 (1.3, 0.3, -2.7, "train"), (0.5, -0.45, -2.9, "test")]
    elif scene_name == "corner":
        target = (-0.3, 0.0, 0.3)
        spots = [(-2.6, 0.4, -2.2, "train"), (-2.9, -0.3, -1.4, "train"),
                 (-1.8, 0.2, -2.8, "train"), (-2.4, -0.5, -2.0, "test")]
    else:
        target = (0.0, 0.0, 0.0)
        spots = [(-2.4, 0.4, -1.6, "train"), (0.0, -0.5, -2.9, "train"),
                 (2.2, 0.5, -1.9, "train"), (1.1, -0.4, -2.6, "test")]
    entries = []
    for i, (x, y, z, split) in enumerate(spots):
        cam = CameraModel.look_at((x, y, z), target, width=size, height=size,
                                  focal=focal)
        entries.append((f"v{i:03d}.png", cam, split))
    return entries


def sample_points(scene_name, count, seed=0):
    """Surface points with texture colors, used to seed training."""
    rng = np.random.default_rng(seed)
    if scene_name == "edge":
        xy = rng.uniform(-1, 1, (count, 2))
        pts = np.column_stack([xy, np.zeros(count)])
        rgb = _checker((xy[:, 0] + 1) / 2, (xy[:, 1] + 1) / 2, 4,
                       EDGE_COLOR_A, EDGE_COLOR_B)
    elif scene_name == "corner":
        n_a = count // 2
        xa = rng.uniform(-1, 0, n_a)
        ya = rng.uniform(-1, 1, n_a)
        pa = np.column_stack([xa, ya, np.zeros(n_a)])
        ca = _checker(-xa, (ya + 1) / 2, 4, CORNER_COLOR_A, EDGE_COLOR_B)
        n_b = count - n_a
        zb = rng.uniform(0, 1, n_b)
        yb = rng.uniform(-1, 1, n_b)
        pb = np.column_stack([np.zeros(n_b), yb, zb])
        stripes = (np.floor(yb * 3.0) % 2) == 0
        cb = np.where(stripes[:, None], CORNER_COLOR_B, EDGE_COLOR_A)
        pts = np.concatenate([pa, pb])
        rgb = np.concatenate([ca, cb])
    else:
        v = rng.normal(size=(count, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = 0.8 * v
        bands = (np.floor((v[:, 1] + 1.0) * 3.0) % 2) == 0
        albedo = np.where(bands[:, None], EDGE_COLOR_A, CORNER_COLOR_A)
        shade = 0.25 + 0.75 * np.maximum(0.0, -(v @ LIGHT_DIR))
        rgb = albedo * shade[:, None]
    return pts, np.clip(rgb, 0.0, 1.0)


def build_fixture(scene_name, size=64, n_points=500, seed=0):
    """In-memory dataset: (views, points, colors).

    views is a list of (image name, CameraModel, target image, split).
    """
    if scene_name not in SCENES:
        raise ValueError(f"unknown fixture scene {scene_name!r}")
    views = [
        (name, cam, render_target(scene_name, cam), split)
        for name, cam, split in fixture_cameras(scene_name, size)
    ]
    pts, rgb = sample_points(scene_name, n_points, seed)
    return views, pts, rgb


def make_dataset(out_dir, scene_name, size=64, n_points=500, seed=0):
    """Write a trainable dataset directory; returns its path."""
    from .scene_io import write_image, write_points_ply

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    views, pts, rgb = build_fixture(scene_name, size, n_points, seed)
    cameras = []
    from .geometry import rot_to_quat

    for name, cam, image, split in views:
        write_image(image, out / "images" / name)
        cameras.append({
            "image": name, "width": cam.width, "height": cam.height,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "qvec": list(rot_to_quat(cam.rotation)),
            "tvec": list(cam.translation),
            "split": split,
        })
    with open(out / "cameras.json", "w") as fh:
        json.dump({"scene": scene_name, "background": list(BACKGROUND),
                   "cameras": cameras}, fh, indent=1)
    write_points_ply(pts, rgb, out / "points.ply")
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="generate a procedural fixture dataset")
    parser.add_argument("--scene", choices=SCENES, required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--points", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    path = make_dataset(args.out, args.scene, args.size, args.points, args.seed)
    print(f"wrote {args.scene} dataset to {path}")


if __name__ == "__main__":
    main()
