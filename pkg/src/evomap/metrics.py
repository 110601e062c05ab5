"""Rendering-quality metrics and the evolving-scene evaluation protocol.

Evaluation always compares against the scene's final state: on synthetic
data the reference images are re-rendered noiselessly from the script at
the last event state, because stored frames from earlier sequences show a
scene that no longer exists and a correctly adapted map must disagree with
them. Changed-region variants of each metric (pixels inside event-touched
object silhouettes) give the ablations discriminative power that full-image
averages wash out.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import Dataset
from .gmap import GaussianMap
from .losses import ssim
from .raster import render
from .simulator import changed_region_mask, render_state

PSNR_CAP = 99.0

METRIC_ORDER = ("psnr", "ssim", "depth_l1_cm",
                "changed_psnr", "changed_ssim", "changed_depth_l1_cm")


class MetricError(ValueError):
    """Raised for empty masks or mismatched shapes."""


def psnr(a: np.ndarray, b: np.ndarray,
         mask: Optional[np.ndarray] = None) -> float:
    """Peak signal-to-noise ratio in dB over masked pixels, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is not None:
        if not mask.any():
            raise MetricError("psnr mask selects no pixels")
        a = a[mask]
        b = b[mask]
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def depth_l1_cm(a: np.ndarray, b: np.ndarray,
                valid_mask: np.ndarray) -> float:
    """Mean absolute depth difference over valid pixels, in centimeters."""
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if not valid_mask.any():
        raise MetricError("depth mask selects no pixels")
    return float(np.abs(a[valid_mask] - b[valid_mask]).mean() * 100.0)


def split_protocol(n_frames: int, sequence_starts: Sequence[int],
                   ) -> Tuple[List[int], List[int]]:
    """Hold out every 10th frame of the final sequence; train on the rest.

    Returns (train_ids, heldout_ids); the two partition range(n_frames).
    """
    if n_frames < 1:
        raise MetricError("empty dataset")
    starts = list(sequence_starts) if sequence_starts else [0]
    last = starts[-1]
    heldout = list(range(last, n_frames, 10))
    train = [i for i in range(n_frames) if i not in set(heldout)]
    return train, heldout


@dataclass
class ViewMetrics:
    frame_id: int
    values: Dict[str, float]


@dataclass
class EvalReport:
    splits: Dict[str, List[ViewMetrics]] = field(default_factory=dict)

    def aggregate(self, split: str) -> Dict[str, float]:
        views = self.splits[split]
        out: Dict[str, float] = {}
        for m in METRIC_ORDER:
            vals = [v.values[m] for v in views if m in v.values]
            if vals:
                out[m] = float(np.mean(vals))
        return out

    def format(self, per_view: bool = False) -> str:
        lines: List[str] = []
        for split in sorted(self.splits):
            agg = self.aggregate(split)
            for m in METRIC_ORDER:
                if m in agg:
                    lines.append(f"{split}.{m} = {agg[m]:.6f}")
            lines.append(f"{split}.lpips = unavailable")
        if per_view:
            for split in sorted(self.splits):
                for v in self.splits[split]:
                    for m in METRIC_ORDER:
                        if m in v.values:
                            lines.append(f"{split}.view{v.frame_id:06d}."
                                         f"{m} = {v.values[m]:.6f}")
        return "\n".join(lines) + "\n"


def _final_state_reference(dataset: Dataset, frame) -> Tuple[np.ndarray,
                                                             np.ndarray]:
    script = dataset.script
    state = script.state_at(len(script.trajectory))
    color, depth, _ = render_state(state, script.room, frame.camera)
    return color, depth


def evaluate(gmap: GaussianMap, dataset: Dataset,
             split: Optional[Dict[str, Sequence[int]]] = None,
             background=(0.0, 0.0, 0.0)) -> EvalReport:
    """Render every evaluation pose and score it against the final scene
    state. `split` maps split names to frame ids; by default the protocol
    split is used, as "input" (train) and "novel" (held out).

    With a scripted dataset the reference is the noiseless final-state
    re-render and changed-region metrics are included; otherwise stored
    frames serve as reference and only full-image metrics are reported.
    """
    if split is None:
        train, heldout = split_protocol(len(dataset),
                                        dataset.sequence_starts)
        split = {"input": train, "novel": heldout}

    scripted = dataset.script is not None
    report = EvalReport()
    for name, ids in split.items():
        views: List[ViewMetrics] = []
        for fid in ids:
            frame = dataset.frames[fid]
            out = render(gmap, frame.camera, background=background)
            if scripted:
                ref_color, ref_depth = _final_state_reference(dataset, frame)
            else:
                ref_color, ref_depth = frame.color, frame.depth
            valid = ref_depth > 0
            vals = {
                "psnr": psnr(out.color, ref_color),
                "ssim": float(ssim(out.color, ref_color)),
                "depth_l1_cm": depth_l1_cm(out.depth, ref_depth, valid),
            }
            if scripted:
                changed = changed_region_mask(dataset.script, frame.camera)
                if changed.any():
                    ch3 = changed[..., None] & np.ones(3, dtype=bool)
                    vals["changed_psnr"] = psnr(out.color, ref_color,
                                                mask=ch3)
                    vals["changed_ssim"] = float(ssim(out.color, ref_color,
                                                      mask=changed))
                    if (changed & valid).any():
                        vals["changed_depth_l1_cm"] = depth_l1_cm(
                            out.depth, ref_depth, changed & valid)
            views.append(ViewMetrics(frame_id=fid, values=vals))
        report.splits[name] = views
    return report
