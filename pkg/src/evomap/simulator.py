"""Synthetic evolving-scene generator with exact ground truth.

Scenes are built from axis-aligned boxes: one inverted box forms the room
(the camera lives inside it and sees its inner faces) and solid boxes form
objects. A script lists timed change events (add / remove / move), so the
scene state at any frame is a pure function of the script. Rendering is
analytic ray/box intersection with flat Lambertian shading, a fixed
directional light, and optional checkerboard texturing, which makes depth
maps exact to machine precision before quantization.

World frame is z-up; cameras follow the usual x-right / y-down / z-forward
convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_dilation

from .geometry import Camera

AMBIENT = 0.35
LIGHT_DIR = np.array([0.35, 0.25, 0.9])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
MASK_DILATION_PX = 2


@dataclass
class Box:
    """Axis-aligned textured box. `inverted` means the camera is inside and
    sees the inner faces (used for the room shell)."""

    min_corner: np.ndarray
    max_corner: np.ndarray
    color: np.ndarray
    color2: Optional[np.ndarray] = None   # checker partner; None = untextured
    checker_cell: float = 0.25            # meters
    inverted: bool = False

    def __post_init__(self):
        self.min_corner = np.asarray(self.min_corner, dtype=np.float64)
        self.max_corner = np.asarray(self.max_corner, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if self.color2 is not None:
            self.color2 = np.asarray(self.color2, dtype=np.float64)

    def validate(self):
        if not np.all(self.max_corner > self.min_corner):
            raise ValueError("degenerate box: max_corner must exceed "
                             "min_corner on every axis")

    def moved_to(self, min_corner) -> "Box":
        size = self.max_corner - self.min_corner
        mc = np.asarray(min_corner, dtype=np.float64)
        return Box(mc, mc + size, self.color, self.color2,
                   self.checker_cell, self.inverted)


@dataclass
class Event:
    frame: int
    op: str                     # add | remove | move
    object_id: int
    position: Optional[np.ndarray] = None   # new min corner for add/move

    def __post_init__(self):
        if self.position is not None:
            self.position = np.asarray(self.position, dtype=np.float64)


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def camera(self, pose_c2w: np.ndarray) -> Camera:
        return Camera.from_pose_c2w(self.fx, self.fy, self.cx, self.cy,
                                    self.width, self.height, pose_c2w,
                                    near=self.near, far=self.far)


@dataclass
class SceneScript:
    room: List[Box]
    objects: Dict[int, Box]
    initial: List[int]                 # object ids present at frame 0
    events: List[Event]
    trajectory: List[np.ndarray]       # camera-to-world 4x4 poses
    intrinsics: Intrinsics
    seed: int = 0
    noise: bool = False
    sequence_starts: List[int] = field(default_factory=lambda: [0])

    def validate(self):
        if not self.trajectory:
            raise ValueError("trajectory is empty")
        if not self.sequence_starts or self.sequence_starts[0] != 0:
            raise ValueError("sequence_starts must begin with 0")
        for a, b in zip(self.sequence_starts, self.sequence_starts[1:]):
            if b <= a:
                raise ValueError("sequence_starts must be strictly "
                                 "increasing")
        if self.sequence_starts[-1] >= len(self.trajectory):
            raise ValueError("sequence start beyond trajectory end")
        for b in self.room:
            b.validate()
        for oid, b in self.objects.items():
            if oid <= 0:
                raise ValueError("object ids must be positive (0 is the room)")
            b.validate()
        for oid in self.initial:
            if oid not in self.objects:
                raise ValueError(f"initial object {oid} not defined")
        last = -1
        for ev in self.events:
            if ev.frame <= last:
                raise ValueError("event frame indices must be strictly "
                                 "increasing")
            last = ev.frame
            if ev.object_id not in self.objects:
                raise ValueError(f"event references unknown object "
                                 f"{ev.object_id}")
            if ev.op not in ("add", "remove", "move"):
                raise ValueError(f"unknown event op {ev.op!r}")
            if ev.op in ("add", "move") and ev.position is None and \
                    ev.op == "move":
                raise ValueError("move event needs a position")

    def state_at(self, frame_idx: int) -> Dict[int, Box]:
        """Present objects (id -> box at current pose) after all events with
        frame index <= frame_idx. Pure function of the script."""
        present: Dict[int, Box] = {oid: self.objects[oid]
                                   for oid in self.initial}
        for ev in self.events:
            if ev.frame > frame_idx:
                break
            if ev.op == "add":
                box = self.objects[ev.object_id]
                if ev.position is not None:
                    box = box.moved_to(ev.position)
                present[ev.object_id] = box
            elif ev.op == "remove":
                present.pop(ev.object_id, None)
            elif ev.op == "move":
                base = present.get(ev.object_id, self.objects[ev.object_id])
                present[ev.object_id] = base.moved_to(ev.position)
        return present

    def changed_ids(self) -> List[int]:
        """Ids of every object touched by any event."""
        return sorted({ev.object_id for ev in self.events})

    def to_dict(self) -> dict:
        def box_d(b: Box) -> dict:
            d = {"min": b.min_corner.tolist(), "max": b.max_corner.tolist(),
                 "color": b.color.tolist(), "checker_cell": b.checker_cell,
                 "inverted": b.inverted}
            if b.color2 is not None:
                d["color2"] = b.color2.tolist()
            return d

        intr = self.intrinsics
        return {
            "room": [box_d(b) for b in self.room],
            "objects": {str(k): box_d(v) for k, v in self.objects.items()},
            "initial": list(self.initial),
            "events": [{"frame": ev.frame, "op": ev.op,
                        "object_id": ev.object_id,
                        "position": None if ev.position is None
                        else ev.position.tolist()}
                       for ev in self.events],
            "trajectory": [np.asarray(p).tolist() for p in self.trajectory],
            "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx,
                           "cy": intr.cy, "width": intr.width,
                           "height": intr.height, "near": intr.near,
                           "far": intr.far},
            "seed": self.seed,
            "noise": self.noise,
            "sequence_starts": list(self.sequence_starts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneScript":
        def box_f(bd: dict) -> Box:
            return Box(np.array(bd["min"]), np.array(bd["max"]),
                       np.array(bd["color"]),
                       None if bd.get("color2") is None
                       else np.array(bd["color2"]),
                       bd.get("checker_cell", 0.25),
                       bd.get("inverted", False))

        return cls(
            room=[box_f(b) for b in d["room"]],
            objects={int(k): box_f(v) for k, v in d["objects"].items()},
            initial=[int(i) for i in d["initial"]],
            events=[Event(ev["frame"], ev["op"], ev["object_id"],
                          None if ev.get("position") is None
                          else np.array(ev["position"]))
                    for ev in d["events"]],
            trajectory=[np.array(p, dtype=np.float64)
                        for p in d["trajectory"]],
            intrinsics=Intrinsics(**d["intrinsics"]),
            seed=int(d.get("seed", 0)),
            noise=bool(d.get("noise", False)),
            sequence_starts=[int(s) for s in d.get("sequence_starts", [0])],
        )


@dataclass
class GtFrame:
    index: int
    camera: Camera
    color: np.ndarray                  # (H, W, 3) float in [0, 1]
    depth: np.ndarray                  # (H, W) meters, 0 where no surface
    provenance: np.ndarray             # (H, W) int32 object id, 0 = room
    masks: Dict[int, np.ndarray]       # object id -> bool mask (dilated)


def _intersect_box(origin, dirs, box: Box):
    """Ray/AABB slab test. Returns (t, axis, valid) with t the z-depth
    parameter (dirs have unit camera-z) and axis the face axis."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t_a = (box.min_corner - origin) * inv
    t_b = (box.max_corner - origin) * inv
    lo = np.minimum(t_a, t_b)
    hi = np.maximum(t_a, t_b)
    t0 = lo.max(axis=-1)
    t1 = hi.min(axis=-1)
    eps = 1e-9
    if box.inverted:
        valid = (t0 <= t1) & (t1 > eps)
        t = t1
        axis = hi.argmin(axis=-1)
    else:
        valid = (t0 <= t1) & (t0 > eps)
        t = t0
        axis = lo.argmax(axis=-1)
    return t, axis, valid


def _shade(box: Box, points, dirs, axis):
    """Flat Lambertian shading with optional checker texture."""
    h, w = axis.shape
    normal_sign = -np.sign(np.take_along_axis(dirs, axis[..., None],
                                              axis=-1))[..., 0]
    n_dot_l = normal_sign * LIGHT_DIR[axis]
    lambert = AMBIENT + (1.0 - AMBIENT) * np.maximum(n_dot_l, 0.0)

    base = np.broadcast_to(box.color, (h, w, 3)).copy()
    if box.color2 is not None:
        # checker over the two in-face world coordinates
        uv_axes = np.stack([(axis + 1) % 3, (axis + 2) % 3], axis=-1)
        uv = np.take_along_axis(points, uv_axes, axis=-1)
        cells = np.floor(uv / box.checker_cell).astype(np.int64)
        odd = (cells[..., 0] + cells[..., 1]) % 2 == 1
        base[odd] = box.color2
    return np.clip(base * lambert[..., None], 0.0, 1.0)


def render_state(boxes: Dict[int, Box], room: Sequence[Box],
                 camera: Camera) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render (color, depth, provenance) for a fixed scene state."""
    h, w = camera.height, camera.width
    xs = (np.arange(w) - camera.cx) / camera.fx
    ys = (np.arange(h) - camera.cy) / camera.fy
    gx, gy = np.meshgrid(xs, ys)
    dirs_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    c2w = camera.pose_c2w
    dirs = dirs_cam @ c2w[:3, :3].T
    origin = c2w[:3, 3]

    best_t = np.full((h, w), np.inf)
    color = np.zeros((h, w, 3))
    prov = np.zeros((h, w), dtype=np.int32)

    entries = [(0, b) for b in room] + sorted(boxes.items())
    for oid, box in entries:
        t, axis, valid = _intersect_box(origin, dirs, box)
        closer = valid & (t < best_t)
        if not np.any(closer):
            continue
        pts = origin + t[..., None] * dirs
        shaded = _shade(box, pts, dirs, axis)
        color[closer] = shaded[closer]
        prov[closer] = oid
        best_t[closer] = t[closer]

    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return color, depth, prov


def render_frame(script: SceneScript, frame_idx: int,
                 state: Optional[Dict[int, Box]] = None) -> GtFrame:
    """Render one trajectory frame against the scripted scene state."""
    cam = script.intrinsics.camera(script.trajectory[frame_idx])
    if state is None:
        state = script.state_at(frame_idx)
    color, depth, prov = render_state(state, script.room, cam)

    if script.noise:
        rng = np.random.default_rng((script.seed, frame_idx))
        color = np.clip(color + rng.normal(scale=0.01, size=color.shape),
                        0.0, 1.0)
        depth = np.where(depth > 0,
                         np.maximum(depth + rng.normal(size=depth.shape)
                                    * 0.01 * depth, 0.0),
                         0.0)

    masks = {}
    struct = np.ones((2 * MASK_DILATION_PX + 1, 2 * MASK_DILATION_PX + 1),
                     dtype=bool)
    for oid in sorted(state):
        raw = prov == oid
        if raw.any():
            masks[oid] = binary_dilation(raw, structure=struct)
    return GtFrame(index=frame_idx, camera=cam, color=color, depth=depth,
                   provenance=prov, masks=masks)


def changed_region_mask(script: SceneScript, camera: Camera,
                        dilate_px: int = MASK_DILATION_PX) -> np.ndarray:
    """Silhouette of every event-touched object as seen from `camera`,
    unioned over the initial and final scene states (so both the old and
    the new location of a moved object count as changed)."""
    changed = script.changed_ids()
    h, w = camera.height, camera.width
    mask = np.zeros((h, w), dtype=bool)
    if not changed:
        return mask
    first = {oid: script.objects[oid] for oid in script.initial}
    last = script.state_at(len(script.trajectory))
    for state in (first, last):
        _, _, prov = render_state(state, script.room, camera)
        mask |= np.isin(prov, changed)
    if dilate_px > 0 and mask.any():
        struct = np.ones((2 * dilate_px + 1, 2 * dilate_px + 1), dtype=bool)
        mask = binary_dilation(mask, structure=struct)
    return mask


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from `eye` toward `target` (z-up world)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    upv = np.asarray(up, dtype=np.float64)
    r = np.cross(f, upv)
    norm = np.linalg.norm(r)
    if norm < 1e-9:
        # looking straight up/down; pick an arbitrary right vector
        r = np.cross(f, np.array([0.0, 1.0, 0.0]))
        norm = np.linalg.norm(r)
    r = r / norm
    d = np.cross(f, r)
    pose = np.eye(4)
    pose[:3, 0] = r
    pose[:3, 1] = d
    pose[:3, 2] = f
    pose[:3, 3] = eye
    return pose
