"""Change detection and map adaptation against the newest keyframe.

The adaptation step runs in two phases. The add phase finds pixels where
the observation is in front of the rendered map or simply not represented
yet, and seeds new splats there from the backprojected RGB-D. The remove
phase finds pixels where observation rays would pass through rendered
geometry (so that geometry can no longer exist), collects the splats
forming the rendered surface at those pixels, confirms them against older
covisible keyframes, and widens the set to whole objects through
segmentation masks before tombstoning. The whole step is transactional: on
any error the map is restored to its pre-step state.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from .geometry import SCALE_MAX, SCALE_MIN
from .gmap import GaussianMap
from .keyframes import (Keyframe, covisible_keyframes, mask_stale_add,
                        mask_stale_remove, select_window)
from .optim import AdamOptimizer, OptimSettings, evaluate_frame, \
    optimize_window
from .raster import RenderOutput, render

# Accumulated inside-weight below this is treated as "never really seen
# inside a mask": protects barely-visible background splats (tiny leaked
# blend weights behind an opaque surface) from mask-based removal.
MIN_INSIDE_WEIGHT = 1.0

ALL_SEED_CLAUSES = ("alpha", "overshoot", "color")


@dataclass
class Thresholds:
    eps_opacity: float = 0.5
    eps_depth: float = 0.10          # meters
    eps_color: float = 0.15          # mean-abs per-pixel color error
    eps_seed: float = 0.20
    tau: float = 10.0                # multiplier on median depth error
    mask_cover: float = 0.5
    weight_ratio_gamma: float = 0.6
    # Robustness floors for the remove detector. A real disappearance
    # produces a conflict region of hundreds of pixels whose surface splats
    # carry most of the blend; splat tails bleeding past a silhouette
    # produce a few isolated pixels with marginal weights.
    min_conflict_fraction: float = 0.003   # of the frame's valid pixels
    min_attrib_weight: float = 0.5         # summed over conflict pixels

    def validate(self):
        for name in ("eps_opacity", "eps_depth", "eps_color", "eps_seed",
                     "tau", "mask_cover", "weight_ratio_gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("eps_opacity", "mask_cover", "weight_ratio_gamma"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.min_conflict_fraction < 0 or self.min_attrib_weight < 0:
            raise ValueError("robustness floors must be non-negative")


@dataclass
class ConflictReport:
    """What one adaptation step detected and did."""

    add_region: np.ndarray
    seed_region: np.ndarray
    seeded_ids: np.ndarray
    remove_ids: np.ndarray                    # direct, from the current frame
    masked_remove_ids: np.ndarray             # widened via keyframe masks
    per_kf_remove_region: Dict[int, np.ndarray] = field(default_factory=dict)
    per_kf_masks_used: Dict[int, List[int]] = field(default_factory=dict)
    ignored_px: int = 0
    reseeded_ids: np.ndarray = field(
        default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def removed_total(self) -> int:
        return len(np.union1d(self.remove_ids, self.masked_remove_ids))


def color_error(rendered: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Per-pixel mean absolute color difference."""
    return np.abs(rendered - observed).mean(axis=-1)


def depth_discontinuity(depth: np.ndarray, eps: float) -> np.ndarray:
    """Pixels whose 3x3 neighborhood spans more than `eps` of observed
    depth. Such mixed pixels straddle an object boundary: the sensor sample
    and the rendered blend can legitimately pick different sides, so they
    cannot arbitrate a surface conflict."""
    spread = maximum_filter(depth, 3) - minimum_filter(depth, 3)
    return spread > eps


def neighborhood_color_error(rendered: np.ndarray, observed: np.ndarray,
                             radius: int = 1) -> np.ndarray:
    """Per-pixel color error against the best-matching observed color in a
    small neighborhood. Point-sampled texture aliases by up to a pixel
    between viewpoints, so comparing against the single co-located texel
    flags sharp texture as changed; a genuinely new color differs from the
    whole neighborhood."""
    h, w, _ = observed.shape
    pad = np.pad(observed, ((radius, radius), (radius, radius), (0, 0)),
                 mode="edge")
    best = np.full((h, w), np.inf)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            err = np.abs(rendered - pad[dy:dy + h, dx:dx + w]).mean(axis=-1)
            best = np.minimum(best, err)
    return best


def detect_add_region(out: RenderOutput, frame, th: Thresholds) -> np.ndarray:
    """Pixels where the observation sits in front of well-covered map
    geometry: the silhouette of newly appeared surfaces."""
    valid = frame.depth > 0
    return valid & (out.alpha >= th.eps_opacity) \
        & (out.depth > frame.depth + th.eps_depth)


def detect_seed_region(out: RenderOutput, frame, th: Thresholds,
                       clauses: Sequence[str] = ALL_SEED_CLAUSES,
                       ) -> np.ndarray:
    """Pixels needing new splats: uncovered, depth-overshot, or color
    mismatched beyond the seeding threshold."""
    valid = frame.depth > 0
    region = np.zeros_like(valid)
    if "alpha" in clauses:
        region |= out.alpha < th.eps_opacity
    if "overshoot" in clauses:
        err = np.abs(out.depth - frame.depth)
        med = np.median(err[valid]) if valid.any() else 0.0
        region |= (out.depth - frame.depth) > th.tau * med
    if "color" in clauses:
        region |= color_error(out.color, frame.color) > th.eps_seed
    return region & valid


def seed_gaussians(gmap: GaussianMap, frame, region: np.ndarray,
                   stride: int = 2, opacity: float = 0.5) -> np.ndarray:
    """Backproject a strided subsample of the region into isotropic splats
    (one-pixel footprint: scale depth/fx). Returns the new ids."""
    sub = np.zeros_like(region)
    sub[::stride, ::stride] = True
    pick = region & sub & (frame.depth > 0)
    ii, jj = np.nonzero(pick)
    if len(ii) == 0:
        return np.zeros(0, dtype=np.int64)
    cam = frame.camera
    d = frame.depth[ii, jj].astype(np.float64)
    x = (jj - cam.cx) / cam.fx * d
    y = (ii - cam.cy) / cam.fy * d
    pts_cam = np.stack([x, y, d], axis=-1)
    c2w = cam.pose_c2w
    means = pts_cam @ c2w[:3, :3].T + c2w[:3, 3]

    n = len(ii)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    scale = np.clip(d / cam.fx, SCALE_MIN, SCALE_MAX)
    log_scales = np.repeat(np.log(scale)[:, None], 3, axis=1)
    logits = np.full(n, _logit(opacity))
    colors = frame.color[ii, jj].astype(np.float64)
    labels = None
    if getattr(frame, "provenance", None) is not None:
        labels = frame.provenance[ii, jj].astype(np.int64)
    return gmap.insert(means, colors, log_scales=log_scales, quats=quats,
                       opacity_logits=logits, labels=labels)


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def detect_remove_set(out: RenderOutput, frame, th: Thresholds) -> np.ndarray:
    """Splats forming the rendered surface at pixels whose observation rays
    would pass through the map (rendered closer than observed, with a color
    mismatch confirming it)."""
    if out.contrib_ids is None:
        raise ValueError("render output lacks contributors; pass "
                         "keep_contributors=True")
    valid = frame.depth > 0
    conflict = valid & (out.alpha >= th.eps_opacity) \
        & (color_error(out.color, frame.color) > th.eps_color) \
        & (out.depth < frame.depth - th.eps_depth) \
        & ~depth_discontinuity(frame.depth, th.eps_depth)
    floor = int(np.ceil(th.min_conflict_fraction * max(valid.sum(), 1)))
    if conflict.sum() < max(floor, 1):
        return np.zeros(0, dtype=np.int64)
    w = out.contrib_weights[conflict]            # (npx, cap), front to back
    ids = out.contrib_ids[conflict]
    before = np.cumsum(w, axis=1) - w            # accumulated weight ahead
    in_prefix = (before < th.eps_opacity) & (ids >= 0)
    cand = ids[in_prefix]
    acc = np.zeros(int(cand.max(initial=0)) + 1)
    np.add.at(acc, cand, w[in_prefix])
    strong = acc[cand] >= th.min_attrib_weight
    return np.unique(cand[strong])


def subset_color(out: RenderOutput, eps: float = 1e-12) -> np.ndarray:
    """Un-premultiply a subset render: its color is alpha-composited over
    the background, so divide out the coverage before comparing against an
    observed image."""
    a = np.maximum(out.alpha, eps)[..., None]
    return out.color / a


def keyframe_remove_region(gmap: GaussianMap, remove_ids: np.ndarray,
                           kf: Keyframe, th: Thresholds,
                           ) -> np.ndarray:
    """Pixels of `kf` that genuinely observed the splats now slated for
    removal: the candidate subset renders there in agreement with the
    keyframe's own color and depth."""
    if len(remove_ids) == 0:
        return np.zeros(kf.frame.depth.shape, dtype=bool)
    sub = render(gmap, kf.camera, subset=remove_ids, background=(0, 0, 0))
    valid = kf.frame.depth > 0
    return valid & (sub.alpha >= th.eps_opacity) \
        & (color_error(subset_color(sub), kf.frame.color) < th.eps_color) \
        & (np.abs(sub.depth - kf.frame.depth) < th.eps_depth)


def select_masks(kf: Keyframe, region: np.ndarray, th: Thresholds,
                 ) -> List[int]:
    """Indices of `kf`'s masks overlapping the region by more than
    mask_cover of the smaller of the two areas (robust to both tiny masks
    and tiny conflict slivers)."""
    area_r = int(region.sum())
    if area_r == 0:
        return []
    sel = []
    for i, m in enumerate(kf.frame.masks):
        area_m = int(m.sum())
        if area_m == 0:
            continue
        inter = int((m & region).sum())
        if inter / min(area_m, area_r) > th.mask_cover:
            sel.append(i)
    return sel


def assign_masks_to_gaussians(gmap: GaussianMap,
                              entries: Sequence[Tuple[Keyframe, List[int]]],
                              th: Thresholds) -> np.ndarray:
    """Splats whose blend weight concentrates inside the selected masks,
    jointly over all selected views: inside-weight ratio above gamma.

    The joint accumulation is what makes removal multiview-consistent: a
    splat near an object boundary must look object-like from every selected
    keyframe, not just one."""
    if not entries:
        return np.zeros(0, dtype=np.int64)
    size = max(gmap.next_id, 1)
    inside_w = np.zeros(size)
    outside_w = np.zeros(size)
    for kf, mask_idx in entries:
        union = np.zeros(kf.frame.depth.shape, dtype=bool)
        for i in mask_idx:
            union |= kf.frame.masks[i]
        out = render(gmap, kf.camera, keep_contributors=True)
        ids = out.contrib_ids
        w = out.contrib_weights
        ok = ids >= 0
        in_mask = np.broadcast_to(union[..., None], ids.shape)
        np.add.at(inside_w, ids[ok & in_mask], w[ok & in_mask])
        np.add.at(outside_w, ids[ok & ~in_mask], w[ok & ~in_mask])
    total = inside_w + outside_w
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(total > 0, inside_w / np.maximum(total, 1e-12), 0.0)
    keep = (ratio > th.weight_ratio_gamma) & (inside_w > MIN_INSIDE_WEIGHT)
    cand = np.nonzero(keep)[0].astype(np.int64)
    live = np.isin(cand, gmap.live_ids())
    return cand[live]


def _optimize_rows(gmap: GaussianMap, frame, rows: np.ndarray,
                   optimizer: AdamOptimizer, settings: OptimSettings,
                   iterations: int, background=(0.0, 0.0, 0.0)):
    """Adam steps restricted to a row subset, supervised by one frame."""
    rows = np.sort(rows)
    for _ in range(iterations):
        _, live, dense = evaluate_frame(gmap, frame, settings,
                                        background=background,
                                        with_grad=True)
        if live is None:
            return
        pick = np.isin(live, rows)
        if not pick.any():
            return
        optimizer.step(live[pick], {k: v[pick] for k, v in dense.items()})


@dataclass
class DsaSettings:
    """Knobs of one adaptation step beyond the detection thresholds."""

    mode: str = "full"               # off | add | remove | full
    kf_filtering: str = "partial"    # none | partial | full
    seed_stride: int = 2
    seed_opacity: float = 0.5
    seed_iters: int = 50
    map_iters: int = 60
    remove_window_iters: int = 100
    window_size: int = 8
    covis_tolerance: float = 0.1
    covis_stride: int = 8
    covis_min_fraction: float = 0.05

    def seed_clauses(self) -> Tuple[str, ...]:
        if self.mode in ("add", "full"):
            return ALL_SEED_CLAUSES
        # Without the add detector, seeding still has to cover unexplored
        # space or the map could never bootstrap; only the change-driven
        # clauses are ablated away.
        return ("alpha",)


def dsa_step(gmap: GaussianMap, current: Keyframe,
             keyframes: Sequence[Keyframe], th: Thresholds,
             dsa: DsaSettings, optim_settings: OptimSettings,
             optimizer: AdamOptimizer,
             background=(0.0, 0.0, 0.0)) -> ConflictReport:
    """One full adaptation step against the newest keyframe.

    Order: detect and seed new geometry, briefly optimize the seeds against
    the current keyframe, mark the new geometry stale in older keyframes,
    detect and confirm removals, tombstone them, mark removed regions stale,
    re-seed what the removal exposed, then optimize the covisibility window.
    Transactional: any exception restores the map to its entry state.
    """
    snap = gmap.snapshot()
    try:
        return _dsa_step_inner(gmap, current, keyframes, th, dsa,
                               optim_settings, optimizer, background)
    except Exception:
        gmap.restore(snap)
        raise


def _dsa_step_inner(gmap, current, keyframes, th, dsa, optim_settings,
                    optimizer, background) -> ConflictReport:
    frame = current.frame
    cam = frame.camera
    others = [kf for kf in keyframes if kf is not current]
    covis = covisible_keyframes(frame, others, dsa.covis_tolerance,
                                dsa.covis_stride, dsa.covis_min_fraction)

    h, w = cam.height, cam.width
    empty_region = np.zeros((h, w), dtype=bool)
    no_ids = np.zeros(0, dtype=np.int64)

    out0 = render(gmap, cam, background=background)
    add_region = detect_add_region(out0, frame, th) \
        if dsa.mode in ("add", "full") else empty_region
    seed_region = detect_seed_region(out0, frame, th, dsa.seed_clauses())

    # Split the seeds by what they are evidence of. Seeds at contradiction
    # pixels (map renders a covered surface that disagrees with the
    # observation) witness a scene change, so they may stale older
    # keyframes. Seeds at merely uncovered pixels just extend the map and
    # say nothing against prior observations.
    valid = frame.depth > 0
    contradiction = valid & (out0.alpha >= th.eps_opacity) & (
        (out0.depth > frame.depth + th.eps_depth)
        | (neighborhood_color_error(out0.color, frame.color)
           > th.eps_color))
    drive = seed_gaussians(gmap, frame, seed_region & contradiction,
                           dsa.seed_stride, dsa.seed_opacity)
    extend = seed_gaussians(gmap, frame, seed_region & ~contradiction,
                            dsa.seed_stride, dsa.seed_opacity)
    seeded = np.concatenate([drive, extend])
    if seeded.size:
        rows = gmap.rows_for_ids(seeded)
        _optimize_rows(gmap, current, rows, optimizer, optim_settings,
                       dsa.seed_iters, background)

    ignored_px = 0
    if dsa.mode in ("add", "full") and dsa.kf_filtering != "none" \
            and drive.size:
        for kf, _ in covis:
            sub = render(gmap, kf.camera, subset=drive,
                         background=background)
            kf_valid = kf.frame.depth > 0
            conflict = kf_valid & (sub.alpha >= th.eps_opacity) \
                & ((sub.depth < kf.frame.depth - th.eps_depth)
                   | (neighborhood_color_error(subset_color(sub),
                                               kf.frame.color)
                      > th.eps_color)) \
                & ~depth_discontinuity(kf.frame.depth, th.eps_depth)
            ignored_px += mask_stale_add(kf, conflict, dsa.kf_filtering)

    remove_ids = no_ids
    masked_ids = no_ids
    per_kf_region: Dict[int, np.ndarray] = {}
    per_kf_masks: Dict[int, List[int]] = {}
    reseeded = no_ids
    if dsa.mode in ("remove", "full"):
        out1 = render(gmap, cam, background=background,
                      keep_contributors=True)
        remove_ids = detect_remove_set(out1, frame, th)
        # Splats seeded this step came from this very observation; an
        # apparent conflict with them is an optimization transient, not
        # stale geometry.
        remove_ids = np.setdiff1d(remove_ids, seeded)
        if remove_ids.size:
            entries = []
            for kf, _ in covis:
                region = keyframe_remove_region(gmap, remove_ids, kf, th)
                per_kf_region[kf.id] = region
                sel = select_masks(kf, region, th)
                if sel:
                    per_kf_masks[kf.id] = sel
                    entries.append((kf, sel))
            masked_ids = assign_masks_to_gaussians(gmap, entries, th)
            masked_ids = np.setdiff1d(masked_ids, seeded)
            gmap.tombstone(np.union1d(remove_ids, masked_ids))
            if dsa.kf_filtering != "none":
                for kf, _ in covis:
                    region = per_kf_region.get(kf.id)
                    if region is not None and region.any():
                        mask_stale_remove(kf, region, th.mask_cover,
                                          dsa.kf_filtering)

            # Removal exposes whatever stood behind; fill it immediately so
            # the post-step render already shows background there.
            out2 = render(gmap, cam, background=background)
            region2 = detect_seed_region(out2, frame, th, dsa.seed_clauses())
            reseeded = seed_gaussians(gmap, frame, region2, dsa.seed_stride,
                                      dsa.seed_opacity)
            if reseeded.size:
                rows = gmap.rows_for_ids(reseeded)
                _optimize_rows(gmap, current, rows, optimizer,
                               optim_settings, dsa.seed_iters, background)

    window = select_window(current, keyframes, dsa.window_size,
                           dsa.covis_tolerance, dsa.covis_stride,
                           dsa.covis_min_fraction)
    iters = dsa.remove_window_iters if remove_ids.size else dsa.map_iters
    history = optimize_window(gmap, window,
                              settings=replace(optim_settings,
                                               iterations=iters),
                              optimizer=optimizer, background=background)
    if history and not np.isfinite(history[-1].total):
        raise FloatingPointError("optimization diverged (non-finite loss)")

    return ConflictReport(add_region=add_region, seed_region=seed_region,
                          seeded_ids=seeded, remove_ids=remove_ids,
                          masked_remove_ids=masked_ids,
                          per_kf_remove_region=per_kf_region,
                          per_kf_masks_used=per_kf_masks,
                          ignored_px=ignored_px, reseeded_ids=reseeded)


def prune_transparent(gmap: GaussianMap, min_opacity: float = 0.05,
                      ) -> np.ndarray:
    """Tombstone splats whose opacity decayed below the floor."""
    rows = gmap.live_rows()
    if len(rows) == 0:
        return np.zeros(0, dtype=np.int64)
    op = 1.0 / (1.0 + np.exp(-gmap.opacity_logits[rows].astype(np.float64)))
    doomed = gmap.ids[rows][op < min_opacity]
    if doomed.size:
        gmap.tombstone(doomed)
    return doomed
