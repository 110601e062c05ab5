"""Benchmark scene presets shared by the test suite and the CLI.

All presets use a desk-scale room (4.6 x 3.6 x 2.5 m) rendered at 120x90.
Trajectories are tuned so keyframe selection at the default thresholds
(0.3 m / 20 deg) picks a predictable keyframe count, and change events sit
on sequence boundaries (staggered by one frame, which the every-10th
holdout protocol skips anyway).
"""
from __future__ import annotations

import numpy as np

from .simulator import Box, Event, Intrinsics, SceneScript, look_at

WIDTH, HEIGHT = 120, 90
FOCAL = 100.0


def default_intrinsics() -> Intrinsics:
    return Intrinsics(fx=FOCAL, fy=FOCAL, cx=(WIDTH - 1) / 2.0,
                      cy=(HEIGHT - 1) / 2.0, width=WIDTH, height=HEIGHT,
                      near=0.01, far=8.0)


def room_shell() -> Box:
    return Box([-2.3, -1.8, 0.0], [2.3, 1.8, 2.5], [0.62, 0.60, 0.55],
               color2=[0.50, 0.48, 0.44], checker_cell=0.25, inverted=True)


def orbit(n: int, start_deg: float, step_deg: float, radius: float = 1.3,
          z: float = 1.25, target=(0.0, 0.0, 0.6)):
    poses = []
    for k in range(n):
        a = np.deg2rad(start_deg + k * step_deg)
        eye = (radius * np.cos(a), radius * np.sin(a), z)
        poses.append(look_at(eye, target))
    return poses


def line(n: int, p0, p1, target):
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    ts = np.linspace(0.0, 1.0, n)
    return [look_at(p0 + t * (p1 - p0), target) for t in ts]


def static_room(seed: int = 0, noise: bool = False) -> SceneScript:
    """Unchanging room with three textured furniture boxes, all flush
    against walls so depth steps at silhouettes stay small; 30 poses spaced
    so each one trips the keyframe trigger (0.317 m chords)."""
    objects = {
        1: Box([-0.85, -1.80, 0.0], [0.55, -1.46, 0.72], [0.55, 0.38, 0.20],
               color2=[0.42, 0.28, 0.14], checker_cell=0.08),
        2: Box([-0.40, -1.80, 0.72], [0.10, -1.50, 1.16], [0.20, 0.52, 0.25],
               color2=[0.12, 0.38, 0.16], checker_cell=0.08),
        3: Box([-2.30, -0.55, 0.0], [-1.96, 0.65, 1.45], [0.16, 0.45, 0.50],
               color2=[0.10, 0.32, 0.38], checker_cell=0.10),
    }
    return SceneScript(room=[room_shell()], objects=objects,
                       initial=[1, 2, 3], events=[],
                       trajectory=orbit(30, 0.0, 14.0, target=(0.0, 0.0, 0.7)),
                       intrinsics=default_intrinsics(), seed=seed,
                       noise=noise)


def evolving_scene(seed: int = 0, noise: bool = False) -> SceneScript:
    """One object removed and one added between two capture sequences.

    Sequence 1 (frames 0-47) orbits 300 deg with object 1 present; the
    events fire at the boundary; sequence 2 (frames 48-87) re-scans a
    140 deg arc of the changed room."""
    objects = {
        1: Box([-2.30, -0.50, 0.0], [-1.95, 0.40, 0.85], [0.72, 0.15, 0.12],
               color2=[0.52, 0.10, 0.08], checker_cell=0.08),
        2: Box([-0.55, -1.80, 0.0], [0.50, -1.43, 0.80], [0.14, 0.25, 0.68],
               color2=[0.10, 0.17, 0.48], checker_cell=0.08),
    }
    traj = orbit(48, 0.0, 6.38, target=(0.0, 0.0, 0.5)) \
        + orbit(40, 30.0, 3.6, target=(0.0, 0.0, 0.5))
    return SceneScript(room=[room_shell()], objects=objects, initial=[1],
                       events=[Event(48, "remove", 1), Event(49, "add", 2)],
                       trajectory=traj, intrinsics=default_intrinsics(),
                       seed=seed, noise=noise, sequence_starts=[0, 48])


def occlusion_scene(seed: int = 0, noise: bool = False) -> SceneScript:
    """Object 1 stays put; object 2 appears in front of it, so sequence 2
    sees object 1 occluded but never absent. A correct remove detector must
    stay silent for the whole run."""
    objects = {
        1: Box([1.45, -0.35, 0.0], [2.05, 0.25, 0.80], [0.18, 0.50, 0.22],
               color2=[0.12, 0.36, 0.15], checker_cell=0.05),
        2: Box([0.55, -0.30, 0.0], [0.85, 0.20, 1.50], [0.60, 0.48, 0.15],
               color2=[0.45, 0.35, 0.10], checker_cell=0.05),
    }
    traj = orbit(24, 0.0, 15.0, radius=1.0, target=(0.6, 0.0, 0.6)) \
        + orbit(12, 150.0, 10.0, radius=1.0, target=(0.9, 0.0, 0.6))
    return SceneScript(room=[room_shell()], objects=objects, initial=[1],
                       events=[Event(24, "add", 2)],
                       trajectory=traj, intrinsics=default_intrinsics(),
                       seed=seed, noise=noise, sequence_starts=[0, 24])


def partial_view_scene(seed: int = 0, noise: bool = False) -> SceneScript:
    """Object 1 is removed, but every post-change viewpoint has a standing
    divider hiding roughly half of its former location. Full removal then
    has to come from mask propagation through older keyframes."""
    objects = {
        1: Box([1.95, -0.35, 0.0], [2.30, 0.35, 0.95], [0.75, 0.42, 0.12],
               color2=[0.55, 0.30, 0.08], checker_cell=0.08),
        2: Box([0.35, -0.45, 0.0], [0.45, 0.15, 1.35], [0.35, 0.38, 0.52],
               color2=[0.26, 0.28, 0.40], checker_cell=0.10),
    }
    traj = orbit(36, 0.0, 10.0, radius=1.0, target=(0.6, 0.0, 0.5)) \
        + orbit(14, 176.0, 0.8, target=(1.2, 0.0, 0.5))
    return SceneScript(room=[room_shell()], objects=objects, initial=[1, 2],
                       events=[Event(36, "remove", 1)],
                       trajectory=traj, intrinsics=default_intrinsics(),
                       seed=seed, noise=noise, sequence_starts=[0, 36])


def color_change_scene(seed: int = 0, noise: bool = False) -> SceneScript:
    """A poster 8 mm thick disappears from a wall: geometry change below
    1 cm, appearance change large."""
    objects = {
        1: Box([-0.55, 1.792, 0.75], [0.55, 1.80, 1.55], [0.80, 0.15, 0.10],
               color2=[0.85, 0.70, 0.10], checker_cell=0.10),
    }
    traj = line(24, (-1.1, -0.40, 1.15), (1.1, -0.40, 1.15),
                (0.0, 1.8, 1.15)) \
        + line(20, (0.9, -0.35, 1.25), (-0.9, -0.35, 1.25), (0.0, 1.8, 1.15))
    return SceneScript(room=[room_shell()], objects=objects, initial=[1],
                       events=[Event(24, "remove", 1)],
                       trajectory=traj, intrinsics=default_intrinsics(),
                       seed=seed, noise=noise, sequence_starts=[0, 24])


def two_room_script() -> SceneScript:
    """Two sealed rooms side by side; one pose in each, facing apart.
    Exercises projection-based covisibility (the rooms share no surface)."""
    rooms = [Box([-4.5, -1.8, 0.0], [-0.05, 1.8, 2.5], [0.62, 0.60, 0.55],
                 color2=[0.50, 0.48, 0.44], checker_cell=0.25, inverted=True),
             Box([0.05, -1.8, 0.0], [4.5, 1.8, 2.5], [0.58, 0.55, 0.60],
                 color2=[0.46, 0.44, 0.48], checker_cell=0.25, inverted=True)]
    traj = [look_at((-2.2, 0.0, 1.3), (-4.0, 0.0, 1.2)),
            look_at((2.2, 0.0, 1.3), (4.0, 0.0, 1.2))]
    return SceneScript(room=rooms, objects={}, initial=[], events=[],
                       trajectory=traj, intrinsics=default_intrinsics(),
                       seed=0, noise=False)


PRESETS = {
    "static_room": static_room,
    "evolving": evolving_scene,
    "occlusion": occlusion_scene,
    "partial_view": partial_view_scene,
    "color_change": color_change_scene,
    "two_room": two_room_script,
}
