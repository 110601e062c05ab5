"""Analytic gradients of the rasterizer w.r.t. raw Gaussian parameters.

The pixel loop (kernels.backward_kernel) replays blending and produces
screen-space gradients per sorted splat: blended color, camera-space depth,
activated opacity, screen mean and the packed conic. This module chains those
back through

  conic -> 2D covariance -> (3D covariance, perspective Jacobian)
        -> (quaternion, log-scale, world mean)

together with the pinhole mean projection and the opacity sigmoid. The
quaternion gradient includes the normalization term, so finite differences on
the raw (unnormalized) quaternion match it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..geometry import quat_to_rotmat
from ..gmap import GaussianMap
from . import kernels
from .forward import RenderOutput


@dataclass
class ParamGrads:
    """Gradients aligned with `rows`/`ids` (the sorted visible splats)."""

    rows: np.ndarray
    ids: np.ndarray
    means: np.ndarray           # (M, 3)
    quats: np.ndarray           # (M, 4) w.r.t. the raw quaternion
    log_scales: np.ndarray      # (M, 3)
    opacity_logits: np.ndarray  # (M,)
    colors: np.ndarray          # (M, 3)


def _rotmat_quat_backward(g_R: np.ndarray, quats_raw: np.ndarray) -> np.ndarray:
    """Chain dL/dR (N,3,3) to dL/dq for raw quaternions (N,4)."""
    norm = np.linalg.norm(quats_raw, axis=1, keepdims=True)
    qh = quats_raw / norm
    w, x, y, z = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    zero = np.zeros_like(w)

    def mat(rows):
        return 2.0 * np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dR_dw = mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dR_dx = mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dR_dy = mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dR_dz = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])

    g_qh = np.stack([np.einsum("nij,nij->n", g_R, d)
                     for d in (dR_dw, dR_dx, dR_dy, dR_dz)], axis=1)
    # Normalization: d(q/||q||) = (I - qh qh^T) / ||q||
    g_q = (g_qh - np.sum(g_qh * qh, axis=1, keepdims=True) * qh) / norm
    return g_q


def backward(gmap: GaussianMap, out: RenderOutput, d_color: np.ndarray,
             d_depth: Optional[np.ndarray] = None,
             pixel_mask: Optional[np.ndarray] = None) -> ParamGrads:
    """Backpropagate per-pixel gradients through a finished render.

    d_color is dL/d(rendered color), (H, W, 3). d_depth is dL/d(rendered
    depth) or None. pixel_mask zeroes out ignored pixels (True = keep). The
    map must not have been mutated since the forward call.
    """
    ctx = out.ctx
    if ctx is None:
        raise ValueError("render output carries no context (was it sliced?)")
    if ctx.generation != gmap.generation:
        raise ValueError("map was mutated after the forward pass")
    cam = ctx.camera
    h, w = cam.height, cam.width
    d_color = np.asarray(d_color, dtype=np.float64)
    if d_color.shape != (h, w, 3):
        raise ValueError(f"d_color shape {d_color.shape} does not match "
                         f"render size {(h, w, 3)}")
    if d_depth is not None and np.shape(d_depth) != (h, w):
        raise ValueError(f"d_depth shape {np.shape(d_depth)} does not match "
                         f"render size {(h, w)}")

    m = len(ctx.ids)
    g_mean2d = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_depth = np.zeros(m)
    g_opacity = np.zeros(m)
    g_color = np.zeros((m, 3))

    if d_depth is None:
        d_depth = np.zeros((h, w))
    if pixel_mask is None:
        mask8 = np.ones((h, w), dtype=np.uint8)
    else:
        mask8 = np.ascontiguousarray(pixel_mask, dtype=np.uint8)

    if m > 0:
        kernels.backward_kernel(
            ctx.mean2d, ctx.conic, ctx.depth, ctx.opacity, ctx.color,
            ctx.offsets, ctx.entries, w, h, ctx.background, cam.far,
            ctx.cutoff, ctx.normalize_depth, 1e-3,
            np.ascontiguousarray(d_color, dtype=np.float64),
            np.ascontiguousarray(d_depth, dtype=np.float64),
            mask8, g_mean2d, g_conic, g_depth, g_opacity, g_color)

    if m == 0:
        return ParamGrads(ctx.rows, ctx.ids, np.zeros((0, 3)),
                          np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                          np.zeros((0, 3)))

    means, quats, log_scales, logits, _, _ = gmap.gather(ctx.rows)

    # Opacity sigmoid.
    g_logit = g_opacity * ctx.opacity * (1.0 - ctx.opacity)

    # Conic -> 2D covariance. The packed conic treats the off-diagonal as one
    # parameter, so as a full matrix the gradient carries half of it twice.
    G_Q = np.empty((m, 2, 2))
    G_Q[:, 0, 0] = g_conic[:, 0]
    G_Q[:, 0, 1] = 0.5 * g_conic[:, 1]
    G_Q[:, 1, 0] = 0.5 * g_conic[:, 1]
    G_Q[:, 1, 1] = g_conic[:, 2]
    Q = np.empty((m, 2, 2))
    Q[:, 0, 0] = ctx.conic[:, 0]
    Q[:, 0, 1] = ctx.conic[:, 1]
    Q[:, 1, 0] = ctx.conic[:, 1]
    Q[:, 1, 1] = ctx.conic[:, 2]
    G2 = -Q @ G_Q @ Q  # dL/dSigma2D, symmetric

    # Sigma2D = M2 Sigma M2^T + lowpass, with M2 = J @ R_wc.
    from ..geometry import compose_covariance, perspective_jacobian
    Sigma = compose_covariance(quats, log_scales)
    J = perspective_jacobian(ctx.xyz_cam, cam.fx, cam.fy)
    W = cam.rotation_wc
    M2 = J @ W[None]

    g_Sigma = np.einsum("nji,njk,nkl->nil", M2, G2, M2)
    g_M2 = 2.0 * np.einsum("nij,njk,nkl->nil", G2, M2, Sigma)
    g_J = g_M2 @ W.T[None]

    # Pinhole chains into the camera-frame point.
    xs, ys, zs = ctx.xyz_cam[:, 0], ctx.xyz_cam[:, 1], ctx.xyz_cam[:, 2]
    inv_z = 1.0 / zs
    inv_z2 = inv_z * inv_z
    g_xyz = np.zeros((m, 3))
    g_xyz[:, 0] = (g_mean2d[:, 0] * cam.fx * inv_z
                   - g_J[:, 0, 2] * cam.fx * inv_z2)
    g_xyz[:, 1] = (g_mean2d[:, 1] * cam.fy * inv_z
                   - g_J[:, 1, 2] * cam.fy * inv_z2)
    g_xyz[:, 2] = (-g_mean2d[:, 0] * cam.fx * xs * inv_z2
                   - g_mean2d[:, 1] * cam.fy * ys * inv_z2
                   - g_J[:, 0, 0] * cam.fx * inv_z2
                   - g_J[:, 1, 1] * cam.fy * inv_z2
                   + g_J[:, 0, 2] * 2.0 * cam.fx * xs * inv_z2 * inv_z
                   + g_J[:, 1, 2] * 2.0 * cam.fy * ys * inv_z2 * inv_z
                   + g_depth)
    g_mean_world = g_xyz @ W

    # Sigma = A A^T with A = R diag(s).
    R = quat_to_rotmat(quats)
    s = np.exp(log_scales)
    A = R * s[:, None, :]
    g_A = 2.0 * g_Sigma @ A
    g_R = g_A * s[:, None, :]
    g_s = np.einsum("nji,nji->ni", R, g_A)  # diag of R^T g_A
    g_log_scale = g_s * s
    g_quat = _rotmat_quat_backward(g_R, quats)

    return ParamGrads(rows=ctx.rows, ids=ctx.ids, means=g_mean_world,
                      quats=g_quat, log_scales=g_log_scale,
                      opacity_logits=g_logit, colors=g_color)
