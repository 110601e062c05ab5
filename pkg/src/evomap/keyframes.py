"""Keyframe selection, reprojection covisibility, and stale-region masks.

A keyframe owns a monotonically growing ignore mask: pixels marked stale
are permanently excluded from optimization losses. Staleness arrives from
two directions: newly added geometry occluding an old observation (the add
case) and removed geometry the keyframe once saw (the remove case, which
ignores whole segmentation masks rather than raw conflict pixels).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_closing

from .dataset import Frame

COVIS_TOLERANCE = 0.1      # meters of depth agreement for a covisible sample
COVIS_STRIDE = 8
COVIS_MIN_FRACTION = 0.05
CLOSE_RADIUS_BASE = 5      # px at 640-wide images, scaled linearly


@dataclass
class Keyframe:
    frame: Frame
    ignore_mask: np.ndarray = None
    created_at_step: int = 0

    def __post_init__(self):
        if self.ignore_mask is None:
            self.ignore_mask = np.zeros(self.frame.depth.shape, dtype=bool)

    @property
    def id(self) -> int:
        return self.frame.id

    @property
    def camera(self):
        return self.frame.camera

    @property
    def color(self) -> np.ndarray:
        return self.frame.color

    @property
    def depth(self) -> np.ndarray:
        return self.frame.depth

    @property
    def discarded(self) -> bool:
        return bool(self.ignore_mask.all())


def rotation_angle(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, in radians."""
    r = r_a.T @ r_b
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def keyframe_trigger(pose: np.ndarray, last_kf_pose: np.ndarray,
                     theta_translation: float,
                     theta_rotation_deg: float) -> bool:
    dt = float(np.linalg.norm(pose[:3, 3] - last_kf_pose[:3, 3]))
    if dt > theta_translation:
        return True
    ang = rotation_angle(last_kf_pose[:3, :3], pose[:3, :3])
    return ang > np.deg2rad(theta_rotation_deg)


def _sample_points(frame: Frame, stride: int):
    """World-space points backprojected from a stride grid of valid depth."""
    depth = frame.depth
    h, w = depth.shape
    jj, ii = np.meshgrid(np.arange(0, w, stride), np.arange(0, h, stride))
    jj = jj.ravel()
    ii = ii.ravel()
    d = depth[ii, jj]
    keep = d > 0
    jj, ii, d = jj[keep], ii[keep], d[keep]
    cam = frame.camera
    x = (jj - cam.cx) / cam.fx * d
    y = (ii - cam.cy) / cam.fy * d
    pts_cam = np.stack([x, y, d], axis=-1)
    c2w = cam.pose_c2w
    return pts_cam @ c2w[:3, :3].T + c2w[:3, 3]


def covisible_fraction(points_world: np.ndarray, kf: Keyframe,
                       tolerance: float = COVIS_TOLERANCE) -> float:
    """Fraction of sample points that reproject into `kf` unoccluded."""
    if len(points_world) == 0:
        return 0.0
    cam = kf.camera
    pts = cam.world_to_cam(points_world)
    z = pts[:, 2]
    ok = z > cam.near
    u = np.zeros_like(z, dtype=np.int64)
    v = np.zeros_like(z, dtype=np.int64)
    u[ok] = np.round(cam.fx * pts[ok, 0] / z[ok] + cam.cx).astype(np.int64)
    v[ok] = np.round(cam.fy * pts[ok, 1] / z[ok] + cam.cy).astype(np.int64)
    ok &= (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    if not ok.any():
        return 0.0
    d_kf = kf.frame.depth[v[ok], u[ok]]
    hit = (d_kf > 0) & (np.abs(z[ok] - d_kf) < tolerance)
    return float(hit.sum()) / len(points_world)


def covisible_keyframes(frame: Frame, keyframes: Sequence[Keyframe],
                        tolerance: float = COVIS_TOLERANCE,
                        stride: int = COVIS_STRIDE,
                        min_fraction: float = COVIS_MIN_FRACTION,
                        ) -> List[Tuple[Keyframe, float]]:
    """Keyframes seeing enough of `frame`'s backprojected samples, with
    their covisible fractions, in descending-fraction order (newer keyframe
    wins ties). Fully discarded keyframes are skipped."""
    pts = _sample_points(frame, stride)
    scored = []
    for kf in keyframes:
        if kf.discarded:
            continue
        frac = covisible_fraction(pts, kf, tolerance)
        if frac >= min_fraction:
            scored.append((kf, frac))
    scored.sort(key=lambda t: (-t[1], -t[0].id))
    return scored


def select_window(current: Keyframe, keyframes: Sequence[Keyframe],
                  window_size: int, tolerance: float = COVIS_TOLERANCE,
                  stride: int = COVIS_STRIDE,
                  min_fraction: float = COVIS_MIN_FRACTION) -> List[Keyframe]:
    """Current keyframe plus the best covisible ones, up to window_size."""
    if window_size < 1:
        raise ValueError("window_size must be >= 1")
    ranked = covisible_keyframes(current.frame, keyframes, tolerance, stride,
                                 min_fraction)
    window = [current]
    for kf, _ in ranked:
        if len(window) >= window_size:
            break
        if kf is not current:
            window.append(kf)
    return window


def close_radius(width: int, base: int = CLOSE_RADIUS_BASE) -> int:
    return max(1, int(round(base * width / 640.0)))


def morphological_close(mask: np.ndarray, radius: int) -> np.ndarray:
    """Closing with a square element on an effectively infinite canvas, so
    regions touching the image border are not eroded away."""
    if radius < 1 or not mask.any():
        return mask.copy()
    size = 2 * radius + 1
    padded = np.pad(mask, radius)
    closed = binary_closing(padded, structure=np.ones((size, size),
                                                      dtype=bool))
    return closed[radius:-radius, radius:-radius]


def mask_stale_add(kf: Keyframe, conflict: np.ndarray,
                   mode: str = "partial",
                   radius: Optional[int] = None) -> int:
    """Fold an add-case conflict region (new geometry contradicting this
    keyframe's observation) into the ignore mask after morphological
    closing. Returns the number of newly ignored pixels."""
    if mode == "none":
        return 0
    before = int(kf.ignore_mask.sum())
    if mode == "full":
        if conflict.any():
            kf.ignore_mask[:] = True
        return int(kf.ignore_mask.sum()) - before
    if radius is None:
        radius = close_radius(kf.frame.camera.width)
    kf.ignore_mask |= morphological_close(conflict, radius)
    return int(kf.ignore_mask.sum()) - before


def mask_stale_remove(kf: Keyframe, remove_region: np.ndarray,
                      mask_cover: float, mode: str = "partial",
                      ) -> List[int]:
    """Ignore every segmentation mask of `kf` sufficiently covered by the
    remove region. Returns the indices of the masks that were ignored."""
    if mode == "none" or not remove_region.any():
        return []
    selected = []
    for i, m in enumerate(kf.frame.masks):
        area = int(m.sum())
        if area == 0:
            continue
        cover = int((m & remove_region).sum()) / area
        if cover > mask_cover:
            selected.append(i)
    if selected:
        if mode == "full":
            kf.ignore_mask[:] = True
        else:
            for i in selected:
                kf.ignore_mask |= kf.frame.masks[i]
    return selected
