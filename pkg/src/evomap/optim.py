"""Adaptive-moment optimization of the map against a keyframe window.

Each iteration renders one keyframe (round-robin over the window), evaluates
the masked color/depth losses plus the isotropy regularizer, backpropagates
through the rasterizer and applies a per-parameter-group Adam update. Moment
buffers live in the map's auxiliary arrays so they follow rows through
growth, compaction and snapshot/restore; the step counter sits in map.meta
for the same reason.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import LOG_SCALE_MAX, LOG_SCALE_MIN
from .gmap import GaussianMap
from .losses import (DEFAULT_LAMBDA, DEFAULT_W_ISO, LossBreakdown, color_loss,
                     depth_loss, isotropic_reg)
from .raster import backward, render


@dataclass
class OptimSettings:
    lr_mean: float = 1.6e-4        # multiplied by the map's scene extent
    lr_rot: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    iterations: int = 60
    lam: float = DEFAULT_LAMBDA
    w_iso: float = DEFAULT_W_ISO
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    normalize_depth: bool = True

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lam must be in [0, 1]")
        if self.w_iso < 0:
            raise ValueError("w_iso must be >= 0")
        for name in ("lr_mean", "lr_rot", "lr_log_scale", "lr_opacity",
                     "lr_color"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


_GROUPS = (("means", "lr_mean"), ("quats", "lr_rot"),
           ("log_scales", "lr_log_scale"),
           ("opacity_logits", "lr_opacity"), ("colors", "lr_color"))


class AdamOptimizer:
    """Sparse Adam over map rows with post-step reprojection of constraints."""

    def __init__(self, gmap: GaussianMap, settings: OptimSettings):
        self.gmap = gmap
        self.settings = settings
        for field_name, _ in _GROUPS:
            trailing = getattr(gmap, field_name).shape[1:]
            gmap.register_aux("adam_m_" + field_name, trailing_shape=trailing)
            gmap.register_aux("adam_v_" + field_name, trailing_shape=trailing)
        gmap.meta.setdefault("adam_step", 0)

    def step(self, rows: np.ndarray, grads: dict):
        s = self.settings
        gm = self.gmap
        gm.meta["adam_step"] += 1
        t = gm.meta["adam_step"]
        bc1 = 1.0 - s.beta1 ** t
        bc2 = 1.0 - s.beta2 ** t
        extent = gm.scene_extent()
        for field_name, lr_name in _GROUPS:
            g = grads[field_name]
            m = gm.aux("adam_m_" + field_name)
            v = gm.aux("adam_v_" + field_name)
            m[rows] = s.beta1 * m[rows] + (1.0 - s.beta1) * g
            v[rows] = s.beta2 * v[rows] + (1.0 - s.beta2) * g * g
            lr = getattr(s, lr_name)
            if field_name == "means":
                lr *= extent
            update = lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + s.eps)
            arr = getattr(gm, field_name)
            arr[rows] = (arr[rows].astype(np.float64) - update).astype(gm.dtype)

        # Project back onto the valid parameter set.
        q = gm.quats[rows].astype(np.float64)
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        norms[norms < 1e-12] = 1.0
        gm.quats[rows] = (q / norms).astype(gm.dtype)
        gm.log_scales[rows] = np.clip(gm.log_scales[rows], LOG_SCALE_MIN,
                                      LOG_SCALE_MAX)
        gm.colors[rows] = np.clip(gm.colors[rows], 0.0, 1.0)
        gm.touch()


def _zero_breakdown(h: int, w: int) -> LossBreakdown:
    return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, np.zeros((h, w)),
                         np.zeros((h, w)))


def evaluate_frame(gmap: GaussianMap, frame, settings: OptimSettings,
                   background=(0.0, 0.0, 0.0), with_grad: bool = False):
    """Loss breakdown for one frame; optionally gradients over live rows.

    `frame` needs .camera, .color, .depth and .ignore_mask (True = drop the
    pixel). Returns (LossBreakdown, rows, grads-dict) with the latter two
    None when `with_grad` is false or the frame is fully masked.
    """
    cam = frame.camera
    use = ~np.asarray(frame.ignore_mask, dtype=bool)
    h, w = cam.height, cam.width
    if use.sum() == 0:
        return _zero_breakdown(h, w), None, None

    out = render(gmap, cam, background=background,
                 normalize_depth=settings.normalize_depth)

    cres = color_loss(out.color, frame.color, use, lam=settings.lam,
                      with_grad=with_grad)
    loss_color, per_color = cres[0], cres[1]
    k = int(use.sum())
    l1 = float(per_color[use].sum() / k)
    ssim_term = ((loss_color - (1.0 - settings.lam) * l1) / settings.lam
                 if settings.lam > 0 else 0.0)

    depth_valid = use & (frame.depth > 0) & (frame.depth <= cam.far)
    d_depth_grad = None
    if depth_valid.sum() > 0:
        dres = depth_loss(out.depth, frame.depth, depth_valid,
                          with_grad=with_grad)
        loss_depth, per_depth = dres[0], dres[1]
        if with_grad:
            d_depth_grad = dres[2]
    else:
        loss_depth = 0.0
        per_depth = np.abs(out.depth - frame.depth)

    rows = gmap.live_rows()
    if settings.w_iso > 0 and len(rows) > 0:
        if with_grad:
            iso, g_iso = isotropic_reg(
                gmap.log_scales[rows].astype(np.float64), with_grad=True)
        else:
            iso = isotropic_reg(gmap.log_scales[rows].astype(np.float64))
            g_iso = None
    else:
        iso, g_iso = 0.0, None

    total = loss_color + loss_depth + settings.w_iso * iso
    lb = LossBreakdown(total=total, color_l1=l1, ssim_term=ssim_term,
                       depth_l1=loss_depth, iso_reg=iso,
                       per_pixel_color_err=per_color,
                       per_pixel_depth_err=per_depth)
    if not with_grad:
        return lb, None, None
    if len(rows) == 0:
        return lb, None, None

    pg = backward(gmap, out, d_color=cres[2], d_depth=d_depth_grad)
    dense = {
        "means": np.zeros((len(rows), 3)),
        "quats": np.zeros((len(rows), 4)),
        "log_scales": np.zeros((len(rows), 3)),
        "opacity_logits": np.zeros(len(rows)),
        "colors": np.zeros((len(rows), 3)),
    }
    pos = np.searchsorted(rows, pg.rows)
    dense["means"][pos] = pg.means
    dense["quats"][pos] = pg.quats
    dense["log_scales"][pos] = pg.log_scales
    dense["opacity_logits"][pos] = pg.opacity_logits
    dense["colors"][pos] = pg.colors
    if g_iso is not None:
        dense["log_scales"] += settings.w_iso * g_iso
    return lb, rows, dense


def optimize_window(gmap: GaussianMap, keyframes: Sequence,
                    settings: Optional[OptimSettings] = None,
                    optimizer: Optional[AdamOptimizer] = None,
                    background=(0.0, 0.0, 0.0)) -> List[LossBreakdown]:
    """Round-robin optimization of the map over a keyframe window."""
    if settings is None:
        settings = OptimSettings()
    if len(keyframes) == 0:
        raise ValueError("keyframe window is empty")
    opt = optimizer if optimizer is not None else AdamOptimizer(gmap, settings)
    history: List[LossBreakdown] = []
    for it in range(settings.iterations):
        frame = keyframes[it % len(keyframes)]
        lb, rows, dense = evaluate_frame(gmap, frame, settings,
                                         background=background,
                                         with_grad=True)
        history.append(lb)
        if rows is not None and len(rows) > 0:
            opt.step(rows, dense)
    return history
