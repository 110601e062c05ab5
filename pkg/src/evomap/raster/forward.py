"""Forward rendering: tiled rasterizer and a brute-force reference path.

The tiled path is the one the mapper uses. The brute-force path loops over
every splat at every pixel with no tiling, no footprint culling shortcuts and
no transmittance early-out; it exists so the fast path can be checked against
straight-line code. Both share the same blending semantics (3-sigma
truncation, 0.99 alpha clamp, front-to-back order with id tie-breaks).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from ..geometry import SIGMA_CUTOFF, Camera
from ..gmap import GaussianMap
from . import kernels

TRANSMITTANCE_CUTOFF = 1e-4
DEPTH_FLOOR = 1e-3
CONTRIB_CAP = 64


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class RenderContext:
    """Projected, depth-sorted splat data reused by the backward pass."""

    rows: np.ndarray          # map row per sorted splat
    ids: np.ndarray           # stable id per sorted splat
    mean2d: np.ndarray        # (M, 2)
    conic: np.ndarray         # (M, 3) packed [a, b, c] of the 2x2 inverse
    depth: np.ndarray         # (M,) camera-space z
    opacity: np.ndarray       # (M,) activated
    color: np.ndarray         # (M, 3) clamped to [0, 1]
    xyz_cam: np.ndarray       # (M, 3)
    offsets: np.ndarray
    entries: np.ndarray
    camera: Camera
    background: np.ndarray
    cutoff: float
    normalize_depth: bool
    generation: int


@dataclass
class RenderOutput:
    color: np.ndarray         # (H, W, 3) in [0, 1]
    depth: np.ndarray         # (H, W)
    alpha: np.ndarray         # (H, W) accumulated blending weight
    contrib_ids: Optional[np.ndarray] = None     # (H, W, cap) splat ids, -1 pad
    contrib_weights: Optional[np.ndarray] = None  # (H, W, cap)
    contrib_count: Optional[np.ndarray] = None    # (H, W)
    ctx: Optional[RenderContext] = field(default=None, repr=False)


def _prepare_splats(gmap: GaussianMap, camera: Camera,
                    rows: Optional[np.ndarray] = None):
    """Project live splats, cull invisible ones, sort front to back."""
    if rows is None:
        rows = gmap.live_rows()
    means, quats, log_scales, logits, colors, ids = gmap.gather(rows)
    if len(means) == 0:
        z0 = np.zeros
        return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                z0((0, 2)), z0((0, 3)), z0(0), z0(0), z0((0, 3)), z0((0, 3)),
                z0(0))

    from ..geometry import project_batch
    proj = project_batch(means, quats, log_scales, camera)
    keep = proj.visible
    rows = rows[keep]
    ids = ids[keep]
    mean2d = proj.mean2d[keep]
    conic = proj.conic[keep]
    depth = proj.depth[keep]
    radius = proj.radius[keep]
    xyz_cam = proj.xyz_cam[keep]
    opacity = _sigmoid(logits[keep])
    color = np.clip(colors[keep], 0.0, 1.0)

    order = np.lexsort((ids, depth))
    return (rows[order], ids[order], mean2d[order], conic[order],
            depth[order], opacity[order], color[order], xyz_cam[order],
            radius[order])


def render(gmap: GaussianMap, camera: Camera,
           background: Tuple[float, float, float] = (0.0, 0.0, 0.0),
           cutoff: float = TRANSMITTANCE_CUTOFF,
           normalize_depth: bool = True,
           keep_contributors: bool = False,
           rows: Optional[np.ndarray] = None,
           subset=None) -> RenderOutput:
    """Rasterize the map from `camera`.

    `cutoff` is the transmittance early-out; pass 0.0 to disable it (used by
    gradient checks so the output is exactly differentiable). `subset`
    restricts rendering to those splat ids (the adaptation logic re-renders
    suspect subsets this way); `rows` does the same with raw map rows.
    """
    h, w = camera.height, camera.width
    if subset is not None:
        if rows is not None:
            raise ValueError("pass either subset ids or rows, not both")
        rows = gmap.rows_for_ids(np.asarray(sorted(subset), dtype=np.int64))
    bg = np.asarray(background, dtype=np.float64)
    (rows_s, ids, mean2d, conic, depth, opacity, color, xyz_cam,
     radius) = _prepare_splats(gmap, camera, rows)

    out_color = np.zeros((h, w, 3))
    out_depth = np.zeros((h, w))
    out_alpha = np.zeros((h, w))
    cap = CONTRIB_CAP if keep_contributors else 1
    contrib_idx = np.full((h, w, cap), -1, dtype=np.int64)
    contrib_w = np.zeros((h, w, cap))
    contrib_n = np.zeros((h, w), dtype=np.int64)

    if len(ids) > 0:
        offsets, entries = kernels.build_tile_lists(mean2d, radius, w, h)
        kernels.forward_kernel(
            mean2d, conic, depth, opacity, color, offsets, entries, w, h,
            bg, camera.far, cutoff, normalize_depth, DEPTH_FLOOR,
            out_color, out_depth, out_alpha,
            keep_contributors, contrib_idx, contrib_w, contrib_n)
    else:
        n_tiles = (((w + kernels.TILE - 1) // kernels.TILE)
                   * ((h + kernels.TILE - 1) // kernels.TILE))
        offsets = np.zeros(n_tiles + 1, dtype=np.int64)
        entries = np.zeros(0, dtype=np.int64)
        out_color[:] = bg
        out_depth[:] = camera.far

    ctx = RenderContext(rows=rows_s, ids=ids, mean2d=mean2d, conic=conic,
                        depth=depth, opacity=opacity, color=color,
                        xyz_cam=xyz_cam, offsets=offsets,
                        entries=entries, camera=camera, background=bg,
                        cutoff=cutoff, normalize_depth=normalize_depth,
                        generation=gmap.generation)
    out = RenderOutput(color=out_color, depth=out_depth, alpha=out_alpha,
                       ctx=ctx)
    if keep_contributors:
        id_img = np.full((h, w, cap), -1, dtype=np.int64)
        filled = contrib_idx >= 0
        id_img[filled] = ids[contrib_idx[filled]]
        out.contrib_ids = id_img
        out.contrib_weights = contrib_w
        out.contrib_count = contrib_n
    return out


def brute_force_render(gmap: GaussianMap, camera: Camera,
                       background: Tuple[float, float, float] = (0, 0, 0),
                       normalize_depth: bool = True,
                       rows: Optional[np.ndarray] = None,
                       subset=None) -> RenderOutput:
    """Reference renderer: every splat at every pixel, no early-out."""
    h, w = camera.height, camera.width
    if subset is not None:
        rows = gmap.rows_for_ids(np.asarray(sorted(subset), dtype=np.int64))
    bg = np.asarray(background, dtype=np.float64)
    (_, ids, mean2d, conic, depth, opacity, color, _,
     _) = _prepare_splats(gmap, camera, rows)

    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    px, py = np.meshgrid(xs, ys)

    trans = np.ones((h, w))
    wsum = np.zeros((h, w))
    dsum = np.zeros((h, w))
    csum = np.zeros((h, w, 3))
    for j in range(len(ids)):
        dx = px - mean2d[j, 0]
        dy = py - mean2d[j, 1]
        sigma = (0.5 * (conic[j, 0] * dx ** 2 + conic[j, 2] * dy ** 2)
                 + conic[j, 1] * dx * dy)
        alpha = np.where(sigma <= SIGMA_CUTOFF,
                         np.minimum(opacity[j] * np.exp(-sigma), 0.99), 0.0)
        wj = alpha * trans
        csum += wj[..., None] * color[j]
        dsum += wj * depth[j]
        wsum += wj
        trans = trans * (1.0 - alpha)

    out_color = csum + trans[..., None] * bg
    if normalize_depth:
        out_depth = np.where(wsum > DEPTH_FLOOR, dsum / np.maximum(wsum, 1e-30),
                             camera.far)
    else:
        out_depth = dsum + camera.far * trans
    return RenderOutput(color=out_color, depth=out_depth, alpha=wsum)
