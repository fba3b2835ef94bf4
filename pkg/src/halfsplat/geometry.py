"""Scene primitives, cameras, and covariance/projection math.

Conventions (shared by every module):
  * world_to_cam maps world points into a right-handed camera frame with
    +z forward, x right, y down; projection is u = fx*x/z + cx.
  * pixel (row i, col j) has its center at (j + 0.5, i + 0.5); cx/cy live in
    the same coordinate system (COLMAP convention).
  * scales are stored as logs, opacities as logits, so positivity and range
    need no projection step.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import CulledBehindCamera, DegenerateFrame, EmptyScene

# Low-pass dilation added to the projected covariance diagonal (px^2) so a
# splat can never fall between pixel centers.
LOWPASS_DILATION = 0.3
DEFAULT_NEAR_CLIP = 0.01
# Whitening frames with condition number beyond this render as plain
# Gaussians for the view.
FRAME_COND_LIMIT = 1e8


def quat_to_rot(q):
    """Unit-normalized quaternion(s) (w, x, y, z) to rotation matrices.

    Accepts shape (4,) or (N, 4); zero quaternions are rejected.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=1)
    if np.any(norm == 0.0):
        raise ValueError("zero quaternion")
    w, x, y, z = (q / norm[:, None]).T
    r = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r[0] if single else r


def rot_to_quat(r):
    """Rotation matrix to unit quaternion (w, x, y, z), Shepperd's method."""
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
             (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s,
             (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] >= r[2, 2]:
        s = 2.0 * np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s,
             (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s,
             (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q / np.linalg.norm(q)


def quat_rot_vjp(q_unit, d_rot):
    """Accumulate rotation-matrix cotangents back onto unit quaternions.

    ``q_unit`` is (N, 4) already normalized, ``d_rot`` is (N, 3, 3); returns
    (N, 4) gradients w.r.t. the unit quaternion (normalization chain is the
    caller's job).
    """
    w, x, y, z = q_unit.T
    zero = np.zeros_like(w)
    # dR/dw, dR/dx, dR/dy, dR/dz stacked as (N, 4, 3, 3)
    dr = np.empty((q_unit.shape[0], 4, 3, 3), dtype=np.float64)
    dr[:, 0] = 2 * np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1),
    ], -2)
    dr[:, 1] = 2 * np.stack([
        np.stack([zero, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1),
    ], -2)
    dr[:, 2] = 2 * np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, zero, z], -1),
        np.stack([-w, z, -2 * y], -1),
    ], -2)
    dr[:, 3] = 2 * np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, zero], -1),
    ], -2)
    return np.einsum("nqij,nij->nq", dr, d_rot)


def build_covariance_batch(log_scale, rotation):
    """Sigma = R S S^T R^T for (N, 3) log-scales and (N, 4) quaternions."""
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    r = quat_to_rot(rotation)
    m = r * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def build_covariance(log_scale, rotation):
    """Symmetric positive-definite 3x3 covariance of a single primitive."""
    return build_covariance_batch(
        np.asarray(log_scale, dtype=np.float64)[None],
        np.asarray(rotation, dtype=np.float64)[None],
    )[0]


def chol3_batch(a):
    """Hand-rolled batched 3x3 Cholesky with a degeneracy mask.

    Returns (L, bad) where ``bad`` marks matrices that are numerically
    non-PD or whose factor condition number exceeds FRAME_COND_LIMIT.
    BLAS-free so renders stay bit-reproducible across linalg backends.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    l = np.zeros((n, 3, 3), dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        d0 = a[:, 0, 0]
        l00 = np.sqrt(np.maximum(d0, 0.0))
        l10 = a[:, 1, 0] / l00
        l20 = a[:, 2, 0] / l00
        d1 = a[:, 1, 1] - l10 * l10
        l11 = np.sqrt(np.maximum(d1, 0.0))
        l21 = (a[:, 2, 1] - l20 * l10) / l11
        d2 = a[:, 2, 2] - l20 * l20 - l21 * l21
        l22 = np.sqrt(np.maximum(d2, 0.0))
    l[:, 0, 0] = l00
    l[:, 1, 0] = l10
    l[:, 1, 1] = l11
    l[:, 2, 0] = l20
    l[:, 2, 1] = l21
    l[:, 2, 2] = l22
    diag = np.stack([l00, l11, l22], axis=1)
    with np.errstate(invalid="ignore"):
        bad = (
            (d0 <= 0.0) | (d1 <= 0.0) | (d2 <= 0.0)
            | ~np.isfinite(diag).all(axis=1)
            | (diag.min(axis=1) * FRAME_COND_LIMIT < diag.max(axis=1))
        )
    l[bad] = np.eye(3)
    return l, bad


def chol3_vjp(l, d_l):
    """Reverse-mode Cholesky: cotangent on A = L L^T from cotangent on L."""
    p = np.swapaxes(l, -1, -2) @ d_l
    # lower triangle with halved diagonal
    phi = np.tril(p)
    idx = np.arange(3)
    phi[:, idx, idx] *= 0.5
    sym = phi + np.swapaxes(phi, -1, -2)
    linv = tri_inv3_batch(l)
    out = 0.5 * (np.swapaxes(linv, -1, -2) @ sym @ linv)
    return out


def tri_inv3_batch(l):
    """Closed-form inverse of batched lower-triangular 3x3 matrices."""
    inv = np.zeros_like(l)
    a, b, c = l[:, 0, 0], l[:, 1, 1], l[:, 2, 2]
    inv[:, 0, 0] = 1.0 / a
    inv[:, 1, 1] = 1.0 / b
    inv[:, 2, 2] = 1.0 / c
    inv[:, 1, 0] = -l[:, 1, 0] / (a * b)
    inv[:, 2, 1] = -l[:, 2, 1] / (b * c)
    inv[:, 2, 0] = (l[:, 1, 0] * l[:, 2, 1] - l[:, 2, 0] * b) / (a * b * c)
    return inv


def perspective_jacobian(t, fx, fy):
    """Ray-space Jacobian rows at camera-space centers t (N, 3).

    Rows 1-2 are the pinhole projection derivative; row 3 is the unit ray
    direction (distance along the ray), making the map full-rank so the
    splitting normal can be carried into ray space.
    """
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    invz = 1.0 / tz
    ell = np.sqrt(tx * tx + ty * ty + tz * tz)
    j = np.zeros((t.shape[0], 3, 3), dtype=np.float64)
    j[:, 0, 0] = fx * invz
    j[:, 0, 2] = -fx * tx * invz * invz
    j[:, 1, 1] = fy * invz
    j[:, 1, 2] = -fy * ty * invz * invz
    j[:, 2, 0] = tx / ell
    j[:, 2, 1] = ty / ell
    j[:, 2, 2] = tz / ell
    return j


@dataclass
class CameraModel:
    """Pinhole camera: world-to-camera rigid transform plus intrinsics."""

    world_to_cam: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near_clip: float = DEFAULT_NEAR_CLIP

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64)
        if self.world_to_cam.shape != (4, 4):
            raise ValueError("world_to_cam must be 4x4")
        r = self.world_to_cam[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-6:
            raise ValueError("world_to_cam rotation block is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @classmethod
    def look_at(cls, position, target, width, height, focal, up=(0, 1, 0),
                near_clip=DEFAULT_NEAR_CLIP):
        """Camera at ``position`` aimed at ``target`` (y-down image frame)."""
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
        w2c = np.eye(4)
        w2c[:3, :3] = np.stack([right, down, forward])
        w2c[:3, 3] = -w2c[:3, :3] @ position
        return cls(world_to_cam=w2c, fx=focal, fy=focal,
                   cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height, near_clip=near_clip)

    @property
    def rotation(self):
        return self.world_to_cam[:3, :3]

    @property
    def translation(self):
        return self.world_to_cam[:3, 3]

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation


def project_covariance(cov, mu, cam):
    """Project a world covariance to the image plane of one camera.

    Returns (cov2d, mu_hat, depth): the dilated top-left 2x2 block of
    J W Sigma W^T J^T, the pinhole projection of mu in pixels, and the
    camera-space depth.  Raises CulledBehindCamera at or behind the near
    clip plane.
    """
    t = cam.to_camera(mu)[0]
    if t[2] <= cam.near_clip:
        raise CulledBehindCamera(f"depth {t[2]:.6g} <= near clip {cam.near_clip:.6g}")
    j = perspective_jacobian(t[None], cam.fx, cam.fy)[0, :2, :]
    cov_cam = cam.rotation @ np.asarray(cov, dtype=np.float64) @ cam.rotation.T
    cov2d = j @ cov_cam @ j.T + LOWPASS_DILATION * np.eye(2)
    mu_hat = np.array([
        cam.fx * t[0] / t[2] + cam.cx,
        cam.fy * t[1] / t[2] + cam.cy,
    ])
    return cov2d, mu_hat, float(t[2])


def project_normal(normal, cov, cam):
    """Splitting-plane normal in the whitened ray-space frame (unit length).

    The frame is the one in which the primitive is a unit Gaussian: with
    L L^T = W Sigma W^T, plane normals transform by the inverse transpose of
    the whitening map L^{-1}, i.e. n_ray = normalize(L^T W n).  Raises
    DegenerateFrame when the factor is numerically singular.
    """
    n = np.asarray(normal, dtype=np.float64)
    cov_cam = cam.rotation @ np.asarray(cov, dtype=np.float64) @ cam.rotation.T
    l, bad = chol3_batch(cov_cam[None])
    if bad[0]:
        raise DegenerateFrame("whitening transform is numerically singular")
    y = l[0].T @ (cam.rotation @ n)
    norm = np.linalg.norm(y)
    if norm < 1e-12:
        raise DegenerateFrame("normal vanishes in the whitened frame")
    return y / norm


@dataclass
class HalfGaussianPrimitive:
    """One half-Gaussian pair: a Gaussian split by a plane through its mean."""

    mu: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    sh_coeffs: np.ndarray     # ((L+1)^2, 3)
    normal: np.ndarray
    raw_opacity_a: float      # logit of the positive-side opacity
    raw_opacity_b: float      # logit of the negative-side opacity

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(-1, 3)
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if np.linalg.norm(self.rotation) == 0.0:
            raise ValueError("zero quaternion")
        if np.linalg.norm(self.normal) == 0.0:
            raise ValueError("zero-length splitting normal")

    @property
    def alpha1(self):
        return sigmoid(self.raw_opacity_a)

    @property
    def alpha2(self):
        return sigmoid(self.raw_opacity_b)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


_SH_COUNTS = {0: 1, 1: 4, 2: 9, 3: 16}


@dataclass
class Scene:
    """Struct-of-arrays store for an ordered set of half-Gaussian pairs."""

    mu: np.ndarray              # (N, 3)
    log_scale: np.ndarray       # (N, 3)
    rotation: np.ndarray        # (N, 4)
    sh_coeffs: np.ndarray       # (N, (L+1)^2, 3)
    normal: np.ndarray          # (N, 3)
    raw_opacity_a: np.ndarray   # (N,)
    raw_opacity_b: np.ndarray   # (N,)
    sh_degree: int
    background_color: np.ndarray = field(
        default_factory=lambda: np.zeros(3, dtype=np.float64)
    )

    def __post_init__(self):
        for name in ("mu", "log_scale", "rotation", "sh_coeffs", "normal",
                     "raw_opacity_a", "raw_opacity_b", "background_color"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        # n == 0 is representable (pruning can empty a scene); rendering an
        # empty scene raises EmptyScene at that point.
        n = self.mu.shape[0]
        if self.sh_degree not in _SH_COUNTS:
            raise ValueError("sh_degree must be 0..3")
        want = _SH_COUNTS[self.sh_degree]
        if self.sh_coeffs.shape != (n, want, 3):
            raise ValueError(
                f"sh_coeffs shape {self.sh_coeffs.shape} does not match degree "
                f"{self.sh_degree} (expected {(n, want, 3)})"
            )
        for name, width in (("log_scale", 3), ("rotation", 4), ("normal", 3)):
            if getattr(self, name).shape != (n, width):
                raise ValueError(f"{name} must have shape {(n, width)}")
        if self.raw_opacity_a.shape != (n,) or self.raw_opacity_b.shape != (n,):
            raise ValueError("opacity logits must be 1D of length N")
        if np.any(np.linalg.norm(self.normal, axis=1) == 0.0):
            raise ValueError("zero-length splitting normal")
        if np.any(np.linalg.norm(self.rotation, axis=1) == 0.0):
            raise ValueError("zero quaternion")
        if self.background_color.shape != (3,) or np.any(
            (self.background_color < 0) | (self.background_color > 1)
        ):
            raise ValueError("background_color must be a 3-vector in [0, 1]")

    def __len__(self):
        return self.mu.shape[0]

    @classmethod
    def from_primitives(cls, primitives, sh_degree, background_color=(0, 0, 0)):
        prims = list(primitives)
        if not prims:
            raise EmptyScene("scene must contain at least one primitive")
        return cls(
            mu=np.stack([p.mu for p in prims]),
            log_scale=np.stack([p.log_scale for p in prims]),
            rotation=np.stack([p.rotation for p in prims]),
            sh_coeffs=np.stack([p.sh_coeffs for p in prims]),
            normal=np.stack([p.normal for p in prims]),
            raw_opacity_a=np.array([p.raw_opacity_a for p in prims]),
            raw_opacity_b=np.array([p.raw_opacity_b for p in prims]),
            sh_degree=sh_degree,
            background_color=np.asarray(background_color, dtype=np.float64),
        )

    def primitive(self, i):
        return HalfGaussianPrimitive(
            mu=self.mu[i].copy(),
            log_scale=self.log_scale[i].copy(),
            rotation=self.rotation[i].copy(),
            sh_coeffs=self.sh_coeffs[i].copy(),
            normal=self.normal[i].copy(),
            raw_opacity_a=float(self.raw_opacity_a[i]),
            raw_opacity_b=float(self.raw_opacity_b[i]),
        )

    def copy(self):
        return Scene(
            mu=self.mu.copy(),
            log_scale=self.log_scale.copy(),
            rotation=self.rotation.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            normal=self.normal.copy(),
            raw_opacity_a=self.raw_opacity_a.copy(),
            raw_opacity_b=self.raw_opacity_b.copy(),
            sh_degree=self.sh_degree,
            background_color=self.background_color.copy(),
        )

    def alphas(self):
        return sigmoid(self.raw_opacity_a), sigmoid(self.raw_opacity_b)
