"""The mapping loop: ingest frames, keyframe, adapt, optimize, refine.

One pass over the dataset in frame order. Frames held out by the evaluation
protocol are never seen here. Every accepted keyframe triggers one
adaptation step (which contains the covisibility-window optimization);
transparent splats are pruned and the store compacted between steps. An
optional final refinement round-robins over all retained keyframes.

The conflict log is line-delimited JSON with one record per adaptation
step and no timestamps, so identically configured runs produce identical
bytes.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import cv2
import numpy as np

from .dataset import Dataset
from .dsa import ConflictReport, dsa_step, prune_transparent
from .gmap import GaussianMap
from .keyframes import Keyframe, keyframe_trigger
from .mapconfig import MapperConfig
from .metrics import split_protocol
from .optim import AdamOptimizer, optimize_window
from .raster import render
from .serialize import save_map


class MappingDivergence(RuntimeError):
    """Optimization produced a non-finite loss; carries the step index."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"mapping diverged at step {step}"
        super().__init__(msg + (f": {detail}" if detail else ""))


@dataclass
class RunResult:
    gmap: GaussianMap
    keyframes: List[Keyframe]
    records: List[dict]
    stats: Dict[str, int]
    map_path: Optional[str] = None
    log_path: Optional[str] = None

    def live_label_counts(self) -> np.ndarray:
        rows = self.gmap.live_rows()
        labels = self.gmap.labels[rows]
        return np.bincount(labels, minlength=int(labels.max(initial=0)) + 1)


def _record(step: int, frame_id: int, rep: ConflictReport, pruned: int,
            n_keyframes: int, gmap: GaussianMap) -> dict:
    labels = gmap.labels[gmap.live_rows()]
    counts = np.bincount(labels, minlength=1)
    return {
        "step": step,
        "frame": frame_id,
        "seeded": int(rep.seeded_ids.size),
        "reseeded": int(rep.reseeded_ids.size),
        "removed_direct": int(rep.remove_ids.size),
        "removed_masked": int(rep.masked_remove_ids.size),
        "removed_total": int(rep.removed_total),
        "add_region_px": int(rep.add_region.sum()),
        "seed_region_px": int(rep.seed_region.sum()),
        "ignored_px": int(rep.ignored_px),
        "kf_masks": {str(k): list(map(int, v))
                     for k, v in sorted(rep.per_kf_masks_used.items())},
        "pruned": int(pruned),
        "keyframes": n_keyframes,
        "live": int(len(labels)),
        "live_labels": {str(k): int(c) for k, c in enumerate(counts) if c},
    }


def _write_checkpoint(path: str, out_color: np.ndarray):
    img = np.clip(out_color * 255.0, 0, 255).astype(np.uint8)
    cv2.imwrite(path, cv2.cvtColor(img, cv2.COLOR_RGB2BGR))


def run_mapping(dataset: Dataset, config: MapperConfig,
                out_dir: Optional[str] = None,
                background=(0.0, 0.0, 0.0)) -> RunResult:
    """Run the full mapping pipeline over `dataset` under `config`.

    With `out_dir` set, writes map.evomap, conflicts.jsonl and a per-step
    checkpoint render; otherwise everything stays in memory.
    """
    config.validate()
    th = config.thresholds()
    dsa_settings = config.dsa_settings()
    optim_settings = config.optim_settings()

    gmap = GaussianMap()
    optimizer = AdamOptimizer(gmap, optim_settings)

    skip = set()
    if config.holdout == "protocol":
        _, heldout = split_protocol(len(dataset), dataset.sequence_starts)
        skip = set(heldout)

    ckpt_dir = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)

    keyframes: List[Keyframe] = []
    records: List[dict] = []
    stats = {"keyframes": 0, "seeded": 0, "removed": 0, "pruned": 0,
             "frames_mapped": 0}
    last_kf_pose = None
    step = 0
    for pos, frame in enumerate(dataset.frames):
        if pos in skip:
            continue
        stats["frames_mapped"] += 1
        if last_kf_pose is not None and not keyframe_trigger(
                frame.pose, last_kf_pose, config.theta_translation,
                config.theta_rotation_deg):
            continue
        last_kf_pose = frame.pose
        kf = Keyframe(frame=frame, created_at_step=step)
        keyframes.append(kf)
        try:
            rep = dsa_step(gmap, kf, keyframes, th, dsa_settings,
                           optim_settings, optimizer, background)
        except FloatingPointError as e:
            raise MappingDivergence(step, str(e)) from e
        pruned = prune_transparent(gmap, config.prune_opacity)
        gmap.compact()

        records.append(_record(step, frame.id, rep, pruned.size,
                               len(keyframes), gmap))
        stats["keyframes"] += 1
        stats["seeded"] += int(rep.seeded_ids.size + rep.reseeded_ids.size)
        stats["removed"] += int(rep.removed_total)
        stats["pruned"] += int(pruned.size)
        if ckpt_dir is not None:
            out = render(gmap, frame.camera, background=background)
            _write_checkpoint(os.path.join(ckpt_dir, f"{frame.id:06d}.png"),
                              out.color)
        step += 1

    if config.final_refinement == "on" and keyframes:
        active = [kf for kf in keyframes if not kf.discarded]
        if active:
            history = optimize_window(
                gmap, active,
                settings=replace(optim_settings,
                                 iterations=config.final_refine_iters),
                optimizer=optimizer, background=background)
            if history and not np.isfinite(history[-1].total):
                raise MappingDivergence(step, "final refinement")

    result = RunResult(gmap=gmap, keyframes=keyframes, records=records,
                       stats=stats)
    if out_dir is not None:
        result.map_path = os.path.join(out_dir, "map.evomap")
        save_map(gmap, result.map_path)
        result.log_path = os.path.join(out_dir, "conflicts.jsonl")
        with open(result.log_path, "w") as f:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    return result
