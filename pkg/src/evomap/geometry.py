"""Gaussian primitive types and camera projection math.

A scene primitive is an anisotropic 3D Gaussian parameterized in raw,
unconstrained form (quaternion rotation, log-scale, opacity logit) so that
gradient steps can never produce an invalid covariance. Projection to screen
space follows the first-order EWA linearization of the pinhole map: the 3D
covariance is pushed through the rotation part of the world-to-camera
transform and the perspective Jacobian evaluated at the camera-frame mean.

Pixel convention: pixel (row i, col j) samples the image plane at x = j,
y = i, so a principal point (cx, cy) lands exactly on pixel (cy, cx).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

# Low-pass dilation added to the diagonal of every screen-space covariance,
# in px^2. Keeps sub-pixel splats rasterizable and Sigma2D invertible.
COV2D_LOWPASS = 0.3

# Component-wise bounds on the activated scale, meters.
SCALE_MIN = 1e-6
SCALE_MAX = 10.0
LOG_SCALE_MIN = float(np.log(SCALE_MIN))
LOG_SCALE_MAX = float(np.log(SCALE_MAX))

# Splats are truncated at 3 sigma: sigma = 0.5 * d^2 with Mahalanobis d = 3.
FOOTPRINT_SIGMA = 3.0
SIGMA_CUTOFF = 0.5 * FOOTPRINT_SIGMA * FOOTPRINT_SIGMA

# Projection near floor, meters. The perspective Jacobian carries fx/z, so a
# splat sliding into the camera plane (z -> 0) would blow up into an
# image-sized footprint and hijack the blend; the sensor near plane (1 cm)
# is far too permissive to prevent that.
PROJECT_NEAR = 0.2


def normalize_quat(q: np.ndarray) -> np.ndarray:
    """Return q / ||q||. Raises ValueError on a zero-norm quaternion."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion, normalized internally.

    Accepts a single quaternion (4,) or a batch (N, 4); returns (3, 3) or
    (N, 3, 3).
    """
    q = normalize_quat(q)
    single = q.ndim == 1
    if single:
        q = q[None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return normalize_quat(q)


def compose_covariance(quat: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World-frame covariance R * S * S^T * R^T (symmetric PSD).

    Batched like quat_to_rotmat. Eigenvalues equal exp(2 * log_scale) up to
    the rotation.
    """
    R = quat_to_rotmat(quat)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    A = R * s[..., None, :]  # columns scaled: A = R @ diag(s)
    return A @ np.swapaxes(A, -1, -2)


@dataclass
class Gaussian:
    """One primitive in raw parameter form.

    mean        world-frame position, meters
    quat        rotation as (w, x, y, z); kept unit-norm by the optimizer
    log_scale   per-axis log extent, log-meters
    opacity_logit  sigmoid(.) is the activated opacity in (0, 1)
    color       linear RGB, maintained in [0, 1]
    """

    mean: np.ndarray
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity_logit: float = 0.0
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.quat = np.asarray(self.quat, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def covariance(self) -> np.ndarray:
        return compose_covariance(self.quat, self.log_scale)


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform.

    t_wc maps world points into the camera frame (x right, y down, z forward).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    t_wc: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.t_wc = np.asarray(self.t_wc, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        R = self.t_wc[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9:
            raise ValueError("t_wc rotation block is not orthonormal")

    @classmethod
    def from_pose_c2w(cls, fx, fy, cx, cy, width, height, pose_c2w,
                      near=0.01, far=100.0) -> "Camera":
        """Build from a camera-to-world pose (the dataset convention)."""
        pose_c2w = np.asarray(pose_c2w, dtype=np.float64)
        R = pose_c2w[:3, :3]
        t = pose_c2w[:3, 3]
        t_wc = np.eye(4)
        t_wc[:3, :3] = R.T
        t_wc[:3, 3] = -R.T @ t
        return cls(fx, fy, cx, cy, width, height, t_wc, near, far)

    @property
    def rotation_wc(self) -> np.ndarray:
        return self.t_wc[:3, :3]

    @property
    def pose_c2w(self) -> np.ndarray:
        R = self.t_wc[:3, :3]
        out = np.eye(4)
        out[:3, :3] = R.T
        out[:3, 3] = -R.T @ self.t_wc[:3, 3]
        return out

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.t_wc[:3, :3].T + self.t_wc[:3, 3]

    def backproject(self, px: np.ndarray, py: np.ndarray,
                    depth: np.ndarray) -> np.ndarray:
        """Pixel coordinates + z-depth -> world points, (N, 3)."""
        x = (np.asarray(px, dtype=np.float64) - self.cx) / self.fx * depth
        y = (np.asarray(py, dtype=np.float64) - self.cy) / self.fy * depth
        pts_cam = np.stack([x, y, np.asarray(depth, dtype=np.float64)], axis=-1)
        c2w = self.pose_c2w
        return pts_cam @ c2w[:3, :3].T + c2w[:3, 3]


@dataclass
class Splat2D:
    """A projected Gaussian: screen mean (px), 2x2 covariance (px^2), z-depth."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    visible: bool


def perspective_jacobian(xyz_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """2x3 Jacobian of the pinhole map at a camera-frame point (batched)."""
    xyz_cam = np.atleast_2d(np.asarray(xyz_cam, dtype=np.float64))
    x, y, z = xyz_cam[:, 0], xyz_cam[:, 1], xyz_cam[:, 2]
    J = np.zeros((xyz_cam.shape[0], 2, 3), dtype=np.float64)
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    return J


def project_mean(g: Gaussian, cam: Camera):
    """Project a Gaussian mean. Returns (mean2d, depth, visible).

    Visibility requires near <= z <= far and the screen point to fall inside
    the image rectangle dilated by the 3-sigma footprint of the projected
    covariance. Points at or behind the camera are flagged not visible.
    """
    xyz = cam.world_to_cam(g.mean[None])[0]
    z = xyz[2]
    if z <= 0:
        return np.array([np.nan, np.nan]), z, False
    mean2d = np.array([cam.fx * xyz[0] / z + cam.cx,
                       cam.fy * xyz[1] / z + cam.cy])
    if not (max(cam.near, PROJECT_NEAR) <= z <= cam.far):
        return mean2d, z, False
    cov2d = _cov2d_at(g, cam, xyz)
    radius = FOOTPRINT_SIGMA * np.sqrt(max(np.linalg.eigvalsh(cov2d).max(), 0.0))
    visible = (-radius <= mean2d[0] <= cam.width - 1 + radius
               and -radius <= mean2d[1] <= cam.height - 1 + radius)
    return mean2d, z, bool(visible)


def _cov2d_at(g: Gaussian, cam: Camera, xyz_cam: np.ndarray) -> np.ndarray:
    J = perspective_jacobian(xyz_cam, cam.fx, cam.fy)[0]
    M = J @ cam.rotation_wc
    cov = M @ g.covariance() @ M.T
    return cov + COV2D_LOWPASS * np.eye(2)


def project_covariance(g: Gaussian, cam: Camera) -> np.ndarray:
    """Screen-space 2x2 covariance (low-pass dilated). Requires z > near."""
    xyz = cam.world_to_cam(g.mean[None])[0]
    if xyz[2] <= max(cam.near, PROJECT_NEAR):
        raise ValueError("Gaussian is behind the near plane")
    return _cov2d_at(g, cam, xyz)


def project_gaussian(g: Gaussian, cam: Camera) -> Splat2D:
    mean2d, z, visible = project_mean(g, cam)
    if z <= max(cam.near, PROJECT_NEAR):
        return Splat2D(mean2d, np.full((2, 2), np.nan), z, False)
    return Splat2D(mean2d, project_covariance(g, cam), z, visible)


class ProjectedBatch(NamedTuple):
    mean2d: np.ndarray    # (N, 2), NaN where depth-culled
    conic: np.ndarray     # (N, 3) packed [a, b, c] of inv(cov2d)
    depth: np.ndarray     # (N,) camera-frame z
    radius: np.ndarray    # (N,) 3-sigma screen footprint, px
    visible: np.ndarray   # (N,) bool
    xyz_cam: np.ndarray   # (N, 3)


def project_batch(means, quats, log_scales, cam: Camera) -> ProjectedBatch:
    """Vectorized projection of N Gaussians for the rasterizer.

    Conic and radius entries of invisible Gaussians are left as zeros.
    """
    means = np.asarray(means, dtype=np.float64)
    n = means.shape[0]
    xyz = means @ cam.t_wc[:3, :3].T + cam.t_wc[:3, 3]
    z = xyz[:, 2]
    in_depth = (z >= max(cam.near, PROJECT_NEAR)) & (z <= cam.far)

    mean2d = np.full((n, 2), np.nan)
    conic = np.zeros((n, 3))
    radius = np.zeros(n)
    visible = np.zeros(n, dtype=bool)
    if not np.any(in_depth):
        return ProjectedBatch(mean2d, conic, z, radius, visible, xyz)

    idx = np.flatnonzero(in_depth)
    xs, ys, zs = xyz[idx, 0], xyz[idx, 1], xyz[idx, 2]
    mean2d[idx, 0] = cam.fx * xs / zs + cam.cx
    mean2d[idx, 1] = cam.fy * ys / zs + cam.cy

    cov3 = compose_covariance(quats[idx], log_scales[idx])
    J = perspective_jacobian(xyz[idx], cam.fx, cam.fy)
    M = J @ cam.rotation_wc[None]
    cov2 = M @ cov3 @ np.swapaxes(M, 1, 2)
    a = cov2[:, 0, 0] + COV2D_LOWPASS
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + COV2D_LOWPASS

    # Largest eigenvalue of [[a, b], [b, c]] via the trace/determinant form.
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    lam_max = mid + disc
    r = FOOTPRINT_SIGMA * np.sqrt(lam_max)
    radius[idx] = r

    det = a * c - b * b
    conic[idx, 0] = c / det
    conic[idx, 1] = -b / det
    conic[idx, 2] = a / det

    on_screen = ((mean2d[idx, 0] >= -r) & (mean2d[idx, 0] <= cam.width - 1 + r)
                 & (mean2d[idx, 1] >= -r) & (mean2d[idx, 1] <= cam.height - 1 + r))
    visible[idx] = on_screen
    return ProjectedBatch(mean2d, conic, z, radius, visible, xyz)
