"""On-disk RGB-D dataset layout (TUM-style, extended with masks).

Layout under a dataset root:

    intrinsics.txt        "fx fy cx cy width height near far", one line
    poses.txt             per line "timestamp tx ty tz qx qy qz qw" (c2w)
    color/%06d.png        8-bit RGB
    depth/%06d.png        16-bit grayscale, meters * 4000, 0 = invalid
    masks/%06d/%03d.png   8-bit binary (255 = inside), zero or more per frame
    provenance/%06d.png   optional 16-bit object-id map (synthetic only)
    sequences.txt         optional, one sequence start index per line
    script.json           optional, the generating scene script

Depth quantization is 1/4000 m = 0.25 mm; color quantization 1/255.
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import cv2
import numpy as np

from .geometry import Camera, quat_to_rotmat, rotmat_to_quat
from . import simulator
from .simulator import SceneScript

DEPTH_SCALE = 4000.0
FRAME_DT = 1.0 / 30.0


class DatasetFormatError(Exception):
    """Dataset directory does not conform to the documented layout."""


@dataclass
class Frame:
    """One posed RGB-D observation with optional segmentation masks."""

    id: int
    timestamp: float
    camera: Camera
    color: np.ndarray                      # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray                      # (H, W) float32 meters, 0 invalid
    masks: List[np.ndarray] = field(default_factory=list)
    provenance: Optional[np.ndarray] = None

    @property
    def pose(self) -> np.ndarray:
        return self.camera.pose_c2w


def frame_from_gt(gt, frame_id: Optional[int] = None) -> Frame:
    """Adapt a simulator frame (synthesized in memory) to the observation
    type the mapper consumes, skipping the disk round trip."""
    idx = gt.index if frame_id is None else frame_id
    masks = [gt.masks[k] for k in sorted(gt.masks)]
    return Frame(id=idx, timestamp=idx * FRAME_DT, camera=gt.camera,
                 color=gt.color, depth=gt.depth, masks=masks,
                 provenance=gt.provenance)


@dataclass
class Dataset:
    path: str
    frames: List[Frame]
    sequence_starts: List[int]
    script: Optional[SceneScript] = None

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    @property
    def camera(self) -> Camera:
        return self.frames[0].camera


def _write_pose_line(f, timestamp: float, pose_c2w: np.ndarray):
    t = pose_c2w[:3, 3]
    q = rotmat_to_quat(pose_c2w[:3, :3])    # (w, x, y, z)
    f.write(f"{timestamp:.6f} "
            f"{t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
            f"{q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}\n")


def _parse_pose_line(line: str):
    vals = [float(v) for v in line.split()]
    if len(vals) != 8:
        raise DatasetFormatError(
            f"pose line needs 8 fields, got {len(vals)}: {line!r}")
    ts = vals[0]
    t = np.array(vals[1:4])
    qx, qy, qz, qw = vals[4:8]
    pose = np.eye(4)
    pose[:3, :3] = quat_to_rotmat(np.array([qw, qx, qy, qz]))
    pose[:3, 3] = t
    return ts, pose


def encode_depth(depth: np.ndarray) -> np.ndarray:
    """Meters -> uint16 at 0.25 mm resolution; invalid (<= 0) stays 0."""
    q = np.round(np.asarray(depth) * DEPTH_SCALE)
    q = np.clip(q, 0, np.iinfo(np.uint16).max)
    q[np.asarray(depth) <= 0] = 0
    return q.astype(np.uint16)


def decode_depth(png: np.ndarray) -> np.ndarray:
    return png.astype(np.float32) / DEPTH_SCALE


def _imwrite(path: str, img: np.ndarray):
    if not cv2.imwrite(path, img):
        raise IOError(f"failed to write {path}")


def generate(script: SceneScript, path: str,
             write_provenance: bool = True) -> Dataset:
    """Render every trajectory frame of `script` into a dataset directory.

    Returns the loaded dataset for convenience (so callers can keep the
    exact ground truth that was written)."""
    script.validate()
    os.makedirs(path, exist_ok=True)
    for sub in ("color", "depth", "masks"):
        os.makedirs(os.path.join(path, sub), exist_ok=True)
    if write_provenance:
        os.makedirs(os.path.join(path, "provenance"), exist_ok=True)

    intr = script.intrinsics
    with open(os.path.join(path, "intrinsics.txt"), "w") as f:
        f.write(f"{intr.fx:.9f} {intr.fy:.9f} {intr.cx:.9f} {intr.cy:.9f} "
                f"{intr.width} {intr.height} {intr.near:.9f} {intr.far:.9f}\n")

    with open(os.path.join(path, "poses.txt"), "w") as f:
        for i, pose in enumerate(script.trajectory):
            _write_pose_line(f, i * FRAME_DT, np.asarray(pose))

    with open(os.path.join(path, "sequences.txt"), "w") as f:
        for s in script.sequence_starts:
            f.write(f"{s}\n")

    with open(os.path.join(path, "script.json"), "w") as f:
        json.dump(script.to_dict(), f, indent=1)

    for i in range(len(script.trajectory)):
        gt = simulator.render_frame(script, i)
        rgb8 = np.round(np.clip(gt.color, 0, 1) * 255).astype(np.uint8)
        _imwrite(os.path.join(path, "color", f"{i:06d}.png"),
                 cv2.cvtColor(rgb8, cv2.COLOR_RGB2BGR))
        _imwrite(os.path.join(path, "depth", f"{i:06d}.png"),
                 encode_depth(gt.depth))
        mdir = os.path.join(path, "masks", f"{i:06d}")
        os.makedirs(mdir, exist_ok=True)
        for k, oid in enumerate(sorted(gt.masks)):
            _imwrite(os.path.join(mdir, f"{k:03d}.png"),
                     gt.masks[oid].astype(np.uint8) * 255)
        if write_provenance:
            _imwrite(os.path.join(path, "provenance", f"{i:06d}.png"),
                     gt.provenance.astype(np.uint16))
    return load_dataset(path)


def _read_image(path: str, flags: int) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing dataset file: {path}")
    img = cv2.imread(path, flags)
    if img is None:
        raise IOError(f"corrupt or unreadable image: {path}")
    return img


def load_dataset(path: str) -> Dataset:
    """Load a dataset directory into memory, frames in timestamp order."""
    intr_path = os.path.join(path, "intrinsics.txt")
    poses_path = os.path.join(path, "poses.txt")
    if not os.path.isdir(path) or not os.path.exists(intr_path) \
            or not os.path.exists(poses_path):
        raise DatasetFormatError(
            f"{path} is not a dataset directory (needs intrinsics.txt "
            f"and poses.txt)")

    with open(intr_path) as f:
        vals = f.read().split()
    if len(vals) != 8:
        raise DatasetFormatError(
            f"intrinsics.txt needs 8 fields, got {len(vals)}")
    fx, fy, cx, cy = (float(v) for v in vals[:4])
    width, height = int(vals[4]), int(vals[5])
    near, far = float(vals[6]), float(vals[7])

    with open(poses_path) as f:
        lines = [ln for ln in (l.strip() for l in f) if ln]
    if not lines:
        raise DatasetFormatError("poses.txt is empty")
    poses = [_parse_pose_line(ln) for ln in lines]
    order = np.argsort([p[0] for p in poses], kind="stable")

    masks_root = os.path.join(path, "masks")
    have_masks = os.path.isdir(masks_root)
    if not have_masks:
        warnings.warn(f"{path} has no masks/ directory; frames will carry "
                      f"empty mask lists", stacklevel=2)
    prov_root = os.path.join(path, "provenance")
    have_prov = os.path.isdir(prov_root)

    frames: List[Frame] = []
    for idx in order:
        ts, pose = poses[idx]
        bgr = _read_image(os.path.join(path, "color", f"{idx:06d}.png"),
                          cv2.IMREAD_COLOR)
        if bgr.shape[0] != height or bgr.shape[1] != width:
            raise DatasetFormatError(
                f"color/{idx:06d}.png is {bgr.shape[1]}x{bgr.shape[0]}, "
                f"intrinsics.txt says {width}x{height}")
        color = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0

        d16 = _read_image(os.path.join(path, "depth", f"{idx:06d}.png"),
                          cv2.IMREAD_UNCHANGED)
        if d16.dtype != np.uint16:
            raise DatasetFormatError(
                f"depth/{idx:06d}.png must be 16-bit, got {d16.dtype}")
        if d16.shape != (height, width):
            raise DatasetFormatError(
                f"depth/{idx:06d}.png is {d16.shape[1]}x{d16.shape[0]}, "
                f"intrinsics.txt says {width}x{height}")
        depth = decode_depth(d16)

        masks: List[np.ndarray] = []
        mdir = os.path.join(masks_root, f"{idx:06d}")
        if have_masks and os.path.isdir(mdir):
            for name in sorted(os.listdir(mdir)):
                if not name.endswith(".png"):
                    continue
                m = _read_image(os.path.join(mdir, name),
                                cv2.IMREAD_GRAYSCALE)
                if m.shape != (height, width):
                    raise DatasetFormatError(
                        f"mask {mdir}/{name} has shape {m.shape}, expected "
                        f"{(height, width)}")
                masks.append(m > 127)

        prov = None
        ppath = os.path.join(prov_root, f"{idx:06d}.png")
        if have_prov and os.path.exists(ppath):
            prov = _read_image(ppath, cv2.IMREAD_UNCHANGED).astype(np.int32)

        cam = Camera.from_pose_c2w(fx, fy, cx, cy, width, height, pose,
                                   near=near, far=far)
        frames.append(Frame(id=int(idx), timestamp=ts, camera=cam,
                            color=color, depth=depth, masks=masks,
                            provenance=prov))

    seq_path = os.path.join(path, "sequences.txt")
    sequence_starts = [0]
    if os.path.exists(seq_path):
        with open(seq_path) as f:
            sequence_starts = [int(ln) for ln in f.read().split()]
        if not sequence_starts or sequence_starts[0] != 0:
            raise DatasetFormatError("sequences.txt must start with 0")

    script = None
    spath = os.path.join(path, "script.json")
    if os.path.exists(spath):
        with open(spath) as f:
            script = SceneScript.from_dict(json.load(f))

    return Dataset(path=path, frames=frames,
                   sequence_starts=sequence_starts, script=script)
