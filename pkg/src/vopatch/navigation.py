"""Carrot-chasing navigation and closed-loop VO evaluation.

A closed-loop run keeps two pose chains. The ground-truth chain follows the
carrot-chasing law from the true pose and decides where the camera is, hence
what gets rendered; the VO chain integrates the (scale-corrected) VO
estimates of the motion between consecutive rendered views. The patch only
changes what the VO sees, never where the camera goes.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from .geometry import CameraIntrinsics, MotionSE3
from .imaging import insert_patch
from .renderer import Scene, cone_ring_positions, render_albedo_pair
from .vo import rescale_translation


class DegeneratePath(ValueError):
    pass


class ClosedLoopError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class NavConfig:
    cruise_speed: float = 1.0  # m/s
    fps: float = 10.0
    lookahead: float = 2.0  # m
    arrival_radius: Optional[float] = None  # default: one cruise step
    max_steps: int = 40

    def __post_init__(self):
        if not (self.cruise_speed > 0 and self.fps > 0 and self.lookahead > 0):
            raise ValueError("cruise_speed, fps and lookahead must be positive")
        if self.arrival_radius is not None and not self.arrival_radius > 0:
            raise ValueError("arrival_radius must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def step_length(self) -> float:
        return self.cruise_speed / self.fps

    @property
    def radius(self) -> float:
        return self.step_length if self.arrival_radius is None else self.arrival_radius


def carrot_point(position: np.ndarray, start: np.ndarray, target: np.ndarray, lookahead: float) -> np.ndarray:
    """Point ``lookahead`` ahead of the projection of ``position`` on the segment, clamped at ``target``."""
    seg = target - start
    length = float(np.linalg.norm(seg))
    if length < 1e-12:
        raise DegeneratePath("path start and target coincide")
    u = seg / length
    s = min(max(float((position - start) @ u), 0.0), length)
    return start + min(s + lookahead, length) * u


def carrot_step(pose: MotionSE3, path: tuple, cfg: NavConfig) -> MotionSE3:
    """Relative motion (in the camera frame of ``pose``) for one control step.

    The camera moves toward the carrot by at most one cruise step and turns
    its heading (yaw about world z) to face the carrot; pitch and roll are
    kept. Within the arrival radius of the target the motion is the identity.
    """
    start, target = (np.asarray(p, dtype=np.float64) for p in path)
    position = pose.translation
    carrot = carrot_point(position, start, target, cfg.lookahead)
    if np.linalg.norm(target - position) <= cfg.radius:
        return MotionSE3.identity()
    to_carrot = carrot - position
    dist = float(np.linalg.norm(to_carrot))
    if dist < 1e-12:
        return MotionSE3.identity()
    new_position = position + min(cfg.step_length, dist) * to_carrot / dist
    yaw = math.atan2(to_carrot[1], to_carrot[0]) - geo.heading(pose)
    rotation = geo.rot_z(yaw) * pose.rotation if abs(to_carrot[0]) + abs(to_carrot[1]) > 1e-12 else pose.rotation
    return geo.relative_motion(pose, MotionSE3(rotation, new_position))


@dataclass
class ClosedLoopRun:
    gt_trajectory: list
    vo_trajectory: list
    deviations: np.ndarray
    flags: list = field(default_factory=list)  # steps whose VO translation was zero

    @property
    def distance_travelled(self) -> np.ndarray:
        pos = np.array([p.translation for p in self.gt_trajectory])
        return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos, axis=0), axis=1))])

    def save_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        dist = self.distance_travelled
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "gt_x", "gt_y", "gt_z", "vo_x", "vo_y", "vo_z", "distance", "deviation"])
            for t, (g, v) in enumerate(zip(self.gt_trajectory, self.vo_trajectory)):
                w.writerow([t, *map(repr, map(float, g.translation)), *map(repr, map(float, v.translation)),
                            repr(float(dist[t])), repr(float(self.deviations[t]))])
        return path


def gt_chain(init_pose: MotionSE3, target, cfg: NavConfig) -> list:
    """Poses visited by carrot chasing from ``init_pose`` until arrival or ``max_steps``."""
    path = (init_pose.translation.copy(), np.asarray(target, dtype=np.float64))
    poses = [init_pose]
    for _ in range(cfg.max_steps):
        if np.linalg.norm(path[1] - poses[-1].translation) <= cfg.radius:
            break
        poses.append(poses[-1] @ carrot_step(poses[-1], path, cfg))
    return poses


def closed_loop_run(
    scene: Scene,
    patch: Optional[np.ndarray],
    init_pose: MotionSE3,
    target,
    vo,
    cfg: NavConfig,
    intr: CameraIntrinsics,
    plane_prior: bool = True,
    rescale: bool = True,
) -> ClosedLoopRun:
    """Run the two-chain closed loop; ``patch=None`` renders the black board (clean ``I0``).

    ``vo`` needs ``estimate_trajectory(frames, inv_depth=None)``. With
    ``rescale`` every VO translation is brought to the ground-truth step norm.
    """
    poses = gt_chain(init_pose, target, cfg)
    if len(poses) < 2:
        raise ClosedLoopError("the start pose is already within the arrival radius", 0)
    frames = []
    for t, pose in enumerate(poses):
        try:
            fb = render_albedo_pair(scene, pose, intr, scene_patch_px(patch))
        except geo.PlaneBehindCamera as exc:
            raise ClosedLoopError(str(exc), t) from None
        frames.append(fb.I0 if patch is None else insert_patch(fb.albedo, patch, fb.H))
    inv_depth = None
    if plane_prior:
        depth = getattr(vo, "plane_depth", 5.0)
        inv_depth = np.stack(
            [geo.plane_inverse_depth(intr, p, scene.patch.center, scene.patch.normal, depth) for p in poses[:-1]]
        )
    try:
        est = vo.estimate_trajectory(frames, inv_depth=inv_depth)
    except Exception as exc:  # noqa: BLE001 - re-raised with the failing step
        raise ClosedLoopError(str(exc), getattr(exc, "pair_index", None) or 0) from exc
    vo_poses = [init_pose]
    flags = []
    for t, (a, b) in enumerate(zip(poses[:-1], poses[1:])):
        m = est[t]
        if rescale:
            m, flagged = rescale_translation(m, float(np.linalg.norm(geo.relative_motion(a, b).translation)))
            if flagged:
                flags.append(t)
        vo_poses.append(vo_poses[-1] @ m)
    dev = np.array([np.linalg.norm(g.translation - v.translation) for g, v in zip(poses, vo_poses)])
    return ClosedLoopRun(poses, vo_poses, dev, flags)


def scene_patch_px(patch: Optional[np.ndarray]) -> tuple[int, int]:
    """``(w_p, h_p)`` texel grid for the board homography."""
    if patch is None:
        return (32, 32)
    return (patch.shape[2], patch.shape[1])


def closed_loop_starts(scene: Scene, n: int, distance: float, half_angle_deg: float, approach: float) -> list:
    """``n`` (init pose, target) pairs: ring starts facing their target ``approach`` m off the board."""
    normal = scene.patch.normal if scene.patch.normal @ np.array([0.0, -1.0, 0.0]) > 0 else -scene.patch.normal
    target = scene.patch.center + approach * normal
    # facing along the path keeps the first control step free of a sudden turn
    return [(geo.look_at(p, target), target.copy()) for p in cone_ring_positions(scene, n, distance, half_angle_deg)]
