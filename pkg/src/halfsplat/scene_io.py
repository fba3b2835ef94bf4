"""Persistence: point files, cameras, images, and 3D-GS import.

Point files are binary little-endian PLY.  One vertex element per
half-Gaussian pair with the fixed property order

    x y z nx ny nz f_dc_0..2 f_rest_* opacity opacity_2 scale_0..2 rot_0..3

where nx/ny/nz hold the splitting-plane normal, opacities are logits, and
scales are logs.  f_rest is channel-major (all red rest coefficients, then
green, then blue), matching the de-facto splatting layout so imported files
keep their colors.  Native files are written double precision (round trips
are bit-exact); the loader accepts float or double.  Standard 3D-GS files
(no opacity_2, float32) enter through import_3dgs, which seeds the
splitting normals.
"""

import json
import re
import struct

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.spatial import cKDTree

from .errors import (
    DecodeError,
    EmptyPointCloud,
    MalformedHeader,
    MissingProperty,
    ParseError,
    TruncatedPayload,
    UnsupportedBitDepth,
    UnsupportedCameraModel,
)
from .geometry import CameraModel, Scene, logit
from .sh import SH_C0

_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "int": ("<i4", 4), "int32": ("<i4", 4),
}

# rest coefficients per channel -> SH degree
_SH_DEGREE_BY_REST = {0: 0, 3: 1, 8: 2, 15: 3}


def _read_ply_header(fh):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise MalformedHeader("not a PLY file")
    fmt = fh.readline().split()
    if len(fmt) < 2 or fmt[0] != b"format" or fmt[1] != b"binary_little_endian":
        raise MalformedHeader("expected format binary_little_endian")
    count = None
    props = []
    comments = {}
    while True:
        line = fh.readline()
        if not line:
            raise MalformedHeader("unterminated header")
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == b"end_header":
            break
        if tokens[0] == b"comment":
            parts = line.decode("ascii", "replace").split(None, 2)
            if len(parts) == 3:
                comments[parts[1]] = parts[2].strip()
            continue
        if tokens[0] == b"element":
            if tokens[1] != b"vertex":
                raise MalformedHeader(f"unsupported element {tokens[1].decode()}")
            count = int(tokens[2])
            continue
        if tokens[0] == b"property":
            if tokens[1] == b"list":
                raise MalformedHeader("list properties are not supported")
            tname = tokens[1].decode()
            if tname not in _PLY_TYPES:
                raise MalformedHeader(f"unsupported property type {tname}")
            props.append((tokens[2].decode(), tname))
            continue
        raise MalformedHeader(f"unexpected header line {line.decode(errors='replace').strip()!r}")
    if count is None:
        raise MalformedHeader("missing vertex element")
    return count, props, comments


def _read_ply(path):
    with open(path, "rb") as fh:
        count, props, comments = _read_ply_header(fh)
        body = fh.read()
    stride = sum(_PLY_TYPES[t][1] for _, t in props)
    if len(body) < count * stride:
        raise TruncatedPayload(
            f"expected {count * stride} payload bytes, found {len(body)}"
        )
    dtype = np.dtype([(name, _PLY_TYPES[t][0]) for name, t in props])
    data = np.frombuffer(body[: count * stride], dtype=dtype)
    return data, dict(props), comments


def _require(columns, names):
    for name in names:
        if name not in columns:
            raise MissingProperty(f"point file is missing property {name!r}")


def _rest_names(columns):
    rest = sorted(
        (int(m.group(1)) for m in (re.fullmatch(r"f_rest_(\d+)", c) for c in columns) if m)
    )
    if rest != list(range(len(rest))):
        raise MissingProperty("f_rest_* properties are not contiguous")
    return [f"f_rest_{i}" for i in rest]


def _sh_from_columns(data, n, rest_names):
    n_rest = len(rest_names)
    if n_rest % 3 != 0 or n_rest // 3 not in _SH_DEGREE_BY_REST:
        raise MalformedHeader(f"unsupported f_rest count {n_rest}")
    degree = _SH_DEGREE_BY_REST[n_rest // 3]
    k = (degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    for c in range(3):
        sh[:, 0, c] = data[f"f_dc_{c}"].astype(np.float64)
    if n_rest:
        rest = np.column_stack([data[c].astype(np.float64) for c in rest_names])
        sh[:, 1:, :] = rest.reshape(n, 3, k - 1).transpose(0, 2, 1)
    return sh, degree


def save_scene(scene, path):
    """Write a scene as a double-precision point file (bit-exact round trip)."""
    n = len(scene)
    k = scene.sh_coeffs.shape[1]
    names = (
        ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        + [f"f_rest_{i}" for i in range(3 * (k - 1))]
        + ["opacity", "opacity_2", "scale_0", "scale_1", "scale_2",
           "rot_0", "rot_1", "rot_2", "rot_3"]
    )
    header = ["ply", "format binary_little_endian 1.0"]
    header.append(f"comment sh_degree {scene.sh_degree}")
    header.append(
        "comment background " + " ".join(repr(float(v)) for v in scene.background_color)
    )
    header.append(f"element vertex {n}")
    header.extend(f"property double {name}" for name in names)
    header.append("end_header")

    cols = [scene.mu[:, 0], scene.mu[:, 1], scene.mu[:, 2],
            scene.normal[:, 0], scene.normal[:, 1], scene.normal[:, 2],
            scene.sh_coeffs[:, 0, 0], scene.sh_coeffs[:, 0, 1], scene.sh_coeffs[:, 0, 2]]
    rest = scene.sh_coeffs[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    cols.extend(rest[:, i] for i in range(rest.shape[1]))
    cols.extend([scene.raw_opacity_a, scene.raw_opacity_b,
                 scene.log_scale[:, 0], scene.log_scale[:, 1], scene.log_scale[:, 2],
                 scene.rotation[:, 0], scene.rotation[:, 1],
                 scene.rotation[:, 2], scene.rotation[:, 3]])
    payload = np.column_stack(cols).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(payload.tobytes())


def load_scene(path):
    """Read a native point file back into a Scene."""
    data, columns, comments = _read_ply(path)
    n = data.shape[0]
    _require(columns, ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1",
                       "f_dc_2", "opacity", "opacity_2",
                       "scale_0", "scale_1", "scale_2",
                       "rot_0", "rot_1", "rot_2", "rot_3"])
    sh, degree = _sh_from_columns(data, n, _rest_names(columns))
    if "sh_degree" in comments and int(comments["sh_degree"]) != degree:
        raise MalformedHeader("sh_degree comment disagrees with f_rest count")
    background = (0.0, 0.0, 0.0)
    if "background" in comments:
        background = tuple(float(v) for v in comments["background"].split())
    col = lambda name: data[name].astype(np.float64)
    return Scene(
        mu=np.column_stack([col("x"), col("y"), col("z")]),
        log_scale=np.column_stack([col("scale_0"), col("scale_1"), col("scale_2")]),
        rotation=np.column_stack([col(f"rot_{i}") for i in range(4)]),
        sh_coeffs=sh,
        normal=np.column_stack([col("nx"), col("ny"), col("nz")]),
        raw_opacity_a=col("opacity"),
        raw_opacity_b=col("opacity_2"),
        sh_degree=degree,
        background_color=np.asarray(background),
    )


def import_3dgs(path, normal_init="zero_plus_jitter", seed=0,
                background_color=(0, 0, 0)):
    """Load a standard 3D-GS point file as half-Gaussian pairs.

    Both halves inherit the stored opacity logit, so the imported scene
    renders identically to the source model.  Splitting normals are seeded:
    ``zero_plus_jitter`` draws a tiny isotropic Gaussian and normalizes it,
    ``random_unit`` draws uniformly on the sphere.
    """
    if normal_init not in ("zero_plus_jitter", "random_unit"):
        raise ValueError(f"unknown normal_init {normal_init!r}")
    data, columns, _ = _read_ply(path)
    n = data.shape[0]
    _require(columns, ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                       "scale_0", "scale_1", "scale_2",
                       "rot_0", "rot_1", "rot_2", "rot_3"])
    sh, degree = _sh_from_columns(data, n, _rest_names(columns))
    rng = np.random.default_rng(seed)
    if normal_init == "zero_plus_jitter":
        normals = rng.normal(scale=0.01, size=(n, 3))
    else:
        normals = rng.normal(size=(n, 3))
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    normals = normals / norms
    col = lambda name: data[name].astype(np.float64)
    opacity = col("opacity")
    return Scene(
        mu=np.column_stack([col("x"), col("y"), col("z")]),
        log_scale=np.column_stack([col("scale_0"), col("scale_1"), col("scale_2")]),
        rotation=np.column_stack([col(f"rot_{i}") for i in range(4)]),
        sh_coeffs=sh,
        normal=normals,
        raw_opacity_a=opacity.copy(),
        raw_opacity_b=opacity.copy(),
        sh_degree=degree,
        background_color=np.asarray(background_color, dtype=np.float64),
    )


def export_3dgs(scene, path, opacity="mean"):
    """Write the alpha-collapsed scene in the standard float32 3D-GS layout."""
    n = len(scene)
    k = scene.sh_coeffs.shape[1]
    a1, a2 = scene.alphas()
    if opacity == "mean":
        raw = logit(np.clip(0.5 * (a1 + a2), 1e-6, 1 - 1e-6))
    elif opacity == "first":
        raw = scene.raw_opacity_a
    else:
        raise ValueError(f"unknown opacity mode {opacity!r}")
    names = (
        ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        + [f"f_rest_{i}" for i in range(3 * (k - 1))]
        + ["opacity", "scale_0", "scale_1", "scale_2",
           "rot_0", "rot_1", "rot_2", "rot_3"]
    )
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}"]
    header.extend(f"property float {name}" for name in names)
    header.append("end_header")
    cols = [scene.mu[:, 0], scene.mu[:, 1], scene.mu[:, 2],
            np.zeros(n), np.zeros(n), np.zeros(n),
            scene.sh_coeffs[:, 0, 0], scene.sh_coeffs[:, 0, 1], scene.sh_coeffs[:, 0, 2]]
    rest = scene.sh_coeffs[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    cols.extend(rest[:, i] for i in range(rest.shape[1]))
    cols.extend([raw, scene.log_scale[:, 0], scene.log_scale[:, 1],
                 scene.log_scale[:, 2]] + [scene.rotation[:, i] for i in range(4)])
    payload = np.column_stack(cols).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(payload.tobytes())


def read_points_ply(path):
    """(xyz, rgb) from a plain point-cloud PLY (colors optional, else gray)."""
    data, columns, _ = _read_ply(path)
    _require(columns, ["x", "y", "z"])
    xyz = np.column_stack([data["x"], data["y"], data["z"]]).astype(np.float64)
    if all(c in columns for c in ("red", "green", "blue")):
        rgb = np.column_stack([data["red"], data["green"], data["blue"]]).astype(np.float64)
        if columns["red"] in ("uchar", "uint8"):
            rgb = rgb / 255.0
    else:
        rgb = np.full((xyz.shape[0], 3), 0.5)
    return xyz, rgb


def write_points_ply(xyz, rgb, path):
    n = xyz.shape[0]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header.extend(f"property double {c}" for c in ("x", "y", "z"))
    header.extend(f"property double {c}" for c in ("red", "green", "blue"))
    header.append("end_header")
    payload = np.column_stack([xyz, rgb]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(payload.tobytes())


def init_from_points(xyz, rgb, sh_degree=0, seed=0, background_color=(0, 0, 0),
                     initial_opacity=0.1):
    """Scene from a colored point cloud: one half-Gaussian pair per point.

    Isotropic scale is the log mean distance to the three nearest neighbors
    (floored at 1e-7), rotation is identity, DC color inverts the +0.5
    offset, both opacities start at ``initial_opacity``, and splitting
    normals are seeded uniformly on the sphere.
    """
    xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
    rgb = np.atleast_2d(np.asarray(rgb, dtype=np.float64))
    n = xyz.shape[0]
    if n < 1:
        raise EmptyPointCloud("need at least one point")
    if n > 1:
        k = min(4, n)
        dists, _ = cKDTree(xyz).query(xyz, k=k)
        mean_dist = dists[:, 1:].mean(axis=1)
    else:
        mean_dist = np.zeros(1)
    scale = np.log(np.maximum(mean_dist, 1e-7))
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    kk = (sh_degree + 1) ** 2
    sh = np.zeros((n, kk, 3))
    sh[:, 0, :] = (rgb - 0.5) / SH_C0
    rotation = np.zeros((n, 4))
    rotation[:, 0] = 1.0
    raw = float(logit(initial_opacity))
    return Scene(
        mu=xyz,
        log_scale=np.repeat(scale[:, None], 3, axis=1),
        rotation=rotation,
        sh_coeffs=sh,
        normal=normals,
        raw_opacity_a=np.full(n, raw),
        raw_opacity_b=np.full(n, raw),
        sh_degree=sh_degree,
        background_color=np.asarray(background_color, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# cameras

class CameraEntry:
    """Camera plus its image reference and train/test split."""

    def __init__(self, camera, image, split):
        self.camera = camera
        self.image = image
        self.split = split

    def __repr__(self):
        return f"CameraEntry({self.image!r}, split={self.split!r})"


def _camera_from_json(entry, line_hint):
    try:
        qw, qx, qy, qz = (float(v) for v in entry["qvec"])
        tvec = [float(v) for v in entry["tvec"]]
        w2c = np.eye(4)
        from .geometry import quat_to_rot

        w2c[:3, :3] = quat_to_rot([qw, qx, qy, qz])
        w2c[:3, 3] = tvec
        cam = CameraModel(
            world_to_cam=w2c,
            fx=float(entry["fx"]), fy=float(entry["fy"]),
            cx=float(entry["cx"]), cy=float(entry["cy"]),
            width=int(entry["width"]), height=int(entry["height"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad camera entry: {exc}", line=line_hint)
    split = entry.get("split", "train")
    if split not in ("train", "test"):
        raise ParseError(f"split must be train or test, got {split!r}", line=line_hint)
    return CameraEntry(cam, entry.get("image"), split)


def _load_cameras_json(path):
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), line=exc.lineno)
    entries = payload.get("cameras")
    if not isinstance(entries, list) or not entries:
        raise ParseError("top-level 'cameras' list missing or empty")
    out = [_camera_from_json(e, i + 1) for i, e in enumerate(entries)]
    names = [e.image for e in out]
    if None in names:
        raise ParseError("every camera needs an 'image' reference")
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise ParseError(f"duplicate image name {sorted(dupes)[0]!r}")
    out.sort(key=lambda e: e.image)
    return out


_COLMAP_HOLDOUT = 8  # every 8th image (by name order) becomes the test split


def _load_cameras_colmap(model_dir):
    cams_path = model_dir / "cameras.txt"
    images_path = model_dir / "images.txt"
    intrinsics = {}
    with open(cams_path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 4:
                raise ParseError("short camera line", line=lineno)
            cam_id, model = parts[0], parts[1]
            try:
                width, height = int(parts[2]), int(parts[3])
                params = [float(v) for v in parts[4:]]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno)
            if model == "PINHOLE":
                if len(params) != 4:
                    raise ParseError("PINHOLE expects 4 params", line=lineno)
                fx, fy, cx, cy = params
            elif model == "SIMPLE_PINHOLE":
                if len(params) != 3:
                    raise ParseError("SIMPLE_PINHOLE expects 3 params", line=lineno)
                f, cx, cy = params
                fx = fy = f
            else:
                raise UnsupportedCameraModel(f"camera model {model} (line {lineno})")
            intrinsics[cam_id] = (width, height, fx, fy, cx, cy)

    entries = []
    seen = set()
    with open(images_path) as fh:
        expecting_points = False
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if expecting_points:
                expecting_points = False
                continue
            parts = line.split()
            if len(parts) < 10:
                raise ParseError("short image line", line=lineno)
            try:
                qw, qx, qy, qz, tx, ty, tz = (float(v) for v in parts[1:8])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno)
            cam_id, name = parts[8], parts[9]
            if cam_id not in intrinsics:
                raise ParseError(f"unknown camera id {cam_id}", line=lineno)
            if name in seen:
                raise ParseError(f"duplicate image name {name!r}", line=lineno)
            seen.add(name)
            width, height, fx, fy, cx, cy = intrinsics[cam_id]
            from .geometry import quat_to_rot

            w2c = np.eye(4)
            w2c[:3, :3] = quat_to_rot([qw, qx, qy, qz])
            w2c[:3, 3] = [tx, ty, tz]
            cam = CameraModel(world_to_cam=w2c, fx=fx, fy=fy, cx=cx, cy=cy,
                              width=width, height=height)
            entries.append(CameraEntry(cam, name, "train"))
            expecting_points = True
    entries.sort(key=lambda e: e.image)
    for i, entry in enumerate(entries):
        if i % _COLMAP_HOLDOUT == 0 and len(entries) > 1:
            entry.split = "test"
    return entries


def load_cameras(path):
    """Cameras from a cameras.json file or a COLMAP text model directory.

    Entries come back ordered by image name.  COLMAP models assign every
    8th image to the test split (the usual holdout convention).
    """
    from pathlib import Path

    p = Path(path)
    if p.is_dir():
        if (p / "cameras.json").exists():
            return _load_cameras_json(p / "cameras.json")
        if (p / "cameras.txt").exists():
            return _load_cameras_colmap(p)
        sparse = p / "sparse" / "0"
        if (sparse / "cameras.txt").exists():
            return _load_cameras_colmap(sparse)
        raise ParseError(f"no cameras.json or cameras.txt under {path}")
    return _load_cameras_json(p)


# ---------------------------------------------------------------------------
# images

def read_image(path):
    """8-bit PNG to HxWx3 float in [0, 1] (values scaled by 1/255)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != b"\x89PNG\r\n\x1a\n":
            raise DecodeError(f"{path} is not a PNG file")
        header = fh.read(17)
    if len(header) < 17 or header[4:8] != b"IHDR":
        raise DecodeError(f"{path}: damaged PNG header")
    bit_depth = header[16]
    if bit_depth != 8:
        raise UnsupportedBitDepth(f"{path}: {bit_depth}-bit PNG not supported")
    try:
        img = Image.open(path)
        img = img.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: {exc}")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_image(image, path):
    """HxWx3 float in [0, 1] to an 8-bit PNG (round half to even)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    data = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")
