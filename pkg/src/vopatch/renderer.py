"""Procedural urban scene, ray-cast rasterizer and trajectory datasets.

The scene is a ground plane plus textured facades, one of which hosts the
patch board. Every frame is rendered twice, with an all-black and an
all-white board, which together with the board homography is everything the
insertion model needs.

World frame: x east, y north, z up. The patch facade lies in ``y = 0`` and
faces ``-y``, where the trajectories live.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .autodiff import BilinearSampler
from .geometry import CameraIntrinsics, MotionSE3, PatchPlane
from .imaging import AlbedoPair, load_float_image, save_float_image, to_float32_precision


@dataclass(frozen=True)
class TexturedPlane:
    """Finite rectangle ``origin + a * basis_u + b * basis_v``, ``a in [0, extent_u]``."""

    origin: np.ndarray
    basis_u: np.ndarray
    basis_v: np.ndarray
    extent_u: float
    extent_v: float
    texture: np.ndarray  # (3, th, tw), row index along basis_v

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.basis_u, self.basis_v)


@dataclass(frozen=True)
class Scene:
    planes: tuple
    patch: PatchPlane
    host_index: int
    albedo_lo: np.ndarray = field(default_factory=lambda: np.full(3, 0.03))
    albedo_hi: np.ndarray = field(default_factory=lambda: np.full(3, 1.0))
    light_dir: np.ndarray = field(default_factory=lambda: np.array([-0.3, -1.0, 0.8]))
    ambient: float = 0.35
    diffuse: float = 0.65
    background: np.ndarray = field(default_factory=lambda: np.array([0.62, 0.74, 0.88]))


# ---------------------------------------------------------------------------
# Procedural textures
# ---------------------------------------------------------------------------


def _value_noise(rng: np.random.Generator, shape: tuple[int, int], cells: int) -> np.ndarray:
    grid = rng.random((cells + 1, cells + 1))
    out = ndimage.zoom(grid, (shape[0] / (cells + 1), shape[1] / (cells + 1)), order=3, mode="nearest")
    return out[: shape[0], : shape[1]]


def _fractal(rng, shape, octaves=(4, 8, 16, 32, 64), falloff=0.6) -> np.ndarray:
    out = np.zeros(shape)
    amp, total = 1.0, 0.0
    for cells in octaves:
        out += amp * _value_noise(rng, shape, cells)
        total += amp
        amp *= falloff
    out /= total
    return (out - out.min()) / (np.ptp(out) + 1e-12)


def facade_texture(seed: int, shape=(256, 512), windows=(5, 12)) -> np.ndarray:
    """Plaster noise with a grid of dark framed windows."""
    rng = np.random.default_rng(seed)
    th, tw = shape
    base = rng.uniform(0.45, 0.75, size=3)
    noise = _fractal(rng, shape)
    tex = base[:, None, None] * (0.75 + 0.5 * noise)[None]
    rows, cols = windows
    yy, xx = np.mgrid[0:th, 0:tw]
    cy = (yy + 0.5) / th * rows
    cx = (xx + 0.5) / tw * cols
    fy, fx = cy - np.floor(cy), cx - np.floor(cx)
    pane = (np.abs(fy - 0.5) < 0.3) & (np.abs(fx - 0.5) < 0.25)
    frame = (np.abs(fy - 0.5) < 0.36) & (np.abs(fx - 0.5) < 0.31) & ~pane
    glass = rng.uniform(0.08, 0.3, size=(rows, cols))
    gidx = np.minimum(np.floor(cy).astype(int), rows - 1), np.minimum(np.floor(cx).astype(int), cols - 1)
    tex = np.where(pane[None], (glass[gidx] * (0.8 + 0.4 * noise))[None] * np.array([0.8, 0.9, 1.0])[:, None, None], tex)
    tex = np.where(frame[None], 0.9, tex)
    return np.clip(tex, 0.0, 1.0)


def ground_texture(seed: int, shape=(512, 512)) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = _fractal(rng, shape, octaves=(8, 16, 32, 64, 128), falloff=0.7)
    tiles = ((np.indices(shape).sum(axis=0) // 32) % 2) * 0.08
    g = 0.3 + 0.35 * noise + tiles
    return np.clip(np.stack([g, g * 0.97, g * 0.92]), 0.0, 1.0)


def default_scene(seed: int = 0, patch_size: float = 3.0, patch_center=(0.0, 0.0, 2.5)) -> Scene:
    """Ground, patch facade and one perpendicular side facade (desk scale, meters)."""
    ss = np.random.SeedSequence(seed)
    s_ground, s_main, s_side = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    ex, ey, ez = np.eye(3)
    ground = TexturedPlane(np.array([-20.0, -30.0, 0.0]), ex, ey, 40.0, 40.0, ground_texture(s_ground))
    # Main facade: u along +x, v downward so texture rows run top to bottom.
    main = TexturedPlane(np.array([-9.0, 0.0, 9.0]), ex, -ez, 18.0, 9.0, facade_texture(s_main, (288, 576), (6, 14)))
    side = TexturedPlane(np.array([-5.0, -3.0, 7.0]), ey, -ez, 3.0, 7.0, facade_texture(s_side, (224, 96), (5, 2)))
    patch = PatchPlane.centered(patch_center, ex, -ez, patch_size)
    return Scene(planes=(ground, main, side), patch=patch, host_index=1)


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------


def _sample_texture(tex: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Bilinear lookup with edge clamping; ``a, b`` in ``[0, 1]`` texture units."""
    _, th, tw = tex.shape
    x = np.clip(a * tw - 0.5, 0.0, tw - 1.0)
    y = np.clip(b * th - 0.5, 0.0, th - 1.0)
    x0 = np.minimum(np.floor(x).astype(int), tw - 2)
    y0 = np.minimum(np.floor(y).astype(int), th - 2)
    fx, fy = x - x0, y - y0
    t00, t10 = tex[:, y0, x0], tex[:, y0, x0 + 1]
    t01, t11 = tex[:, y0 + 1, x0], tex[:, y0 + 1, x0 + 1]
    return (t00 * (1 - fx) + t10 * fx) * (1 - fy) + (t01 * (1 - fx) + t11 * fx) * fy


@dataclass
class _Raycast:
    color: np.ndarray  # (3, H, W) scene radiance with the board excluded
    shade: np.ndarray  # (H, W) Lambertian factor of the nearest surface
    board: np.ndarray  # (H, W) bool, nearest surface is the patch board
    board_u: np.ndarray  # (H, W) board coordinates in meters (nan off board)
    board_v: np.ndarray


def _raycast(scene: Scene, pose: MotionSE3, intr: CameraIntrinsics) -> _Raycast:
    h, w = intr.height, intr.width
    rays = intr.pixel_rays().reshape(-1, 3) @ pose.R.T  # camera depth == ray parameter
    origin = pose.translation
    n_px = rays.shape[0]
    depth = np.full(n_px, np.inf)
    color = np.repeat(scene.background[:, None], n_px, axis=1)
    shade = np.ones(n_px)
    hit_host = np.zeros(n_px, dtype=bool)
    light = scene.light_dir / np.linalg.norm(scene.light_dir)
    for k, plane in enumerate(scene.planes):
        n = plane.normal
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((plane.origin - origin) @ n) / denom
        pts = origin + t[:, None] * rays
        rel = pts - plane.origin
        a, b = rel @ plane.basis_u, rel @ plane.basis_v
        ok = (
            np.isfinite(t)
            & (t > 1e-6)
            & (t < depth)
            & (a >= 0)
            & (a <= plane.extent_u)
            & (b >= 0)
            & (b <= plane.extent_v)
        )
        if not ok.any():
            continue
        facing = np.where(denom[ok] > 0, -1.0, 1.0)
        lam = scene.ambient + scene.diffuse * np.maximum(0.0, facing * float(n @ light))
        depth[ok] = t[ok]
        shade[ok] = lam
        color[:, ok] = lam * _sample_texture(plane.texture, a[ok] / plane.extent_u, b[ok] / plane.extent_v)
        hit_host[ok] = k == scene.host_index
    with np.errstate(invalid="ignore"):  # missed rays sit at infinite depth
        pts = origin + depth[:, None] * rays
        rel = pts - scene.patch.origin
        bu, bv = rel @ scene.patch.basis_u, rel @ scene.patch.basis_v
    board = (
        hit_host
        & np.isfinite(depth)
        & (bu >= 0)
        & (bu <= scene.patch.extent_u)
        & (bv >= 0)
        & (bv <= scene.patch.extent_v)
    )
    color[:, board] = 0.0
    return _Raycast(
        color.reshape(3, h, w),
        shade.reshape(h, w),
        board.reshape(h, w),
        np.where(board, bu, np.nan).reshape(h, w),
        np.where(board, bv, np.nan).reshape(h, w),
    )


def render_view(
    scene: Scene, pose: MotionSE3, intr: CameraIntrinsics, patch: Optional[np.ndarray] = None
) -> np.ndarray:
    """Render one view; the board shows ``patch`` between its albedo limits.

    Without a patch the board renders black (the lower albedo limit).
    """
    rc = _raycast(scene, pose, intr)
    img = rc.color.copy()
    if rc.board.any():
        level = np.zeros(int(rc.board.sum()))[None].repeat(3, axis=0)
        if patch is not None:
            patch = np.asarray(patch, dtype=np.float64)
            h_p, w_p = patch.shape[-2:]
            sampler = BilinearSampler(
                rc.board_u[rc.board] / scene.patch.extent_u * w_p,
                rc.board_v[rc.board] / scene.patch.extent_v * h_p,
                (h_p, w_p),
                offset=0.5,
            )
            level = sampler.apply(patch)
        lo, hi = scene.albedo_lo[:, None], scene.albedo_hi[:, None]
        img[:, rc.board] = rc.shade[rc.board] * (lo + level * (hi - lo))
    return to_float32_precision(img)


@dataclass(frozen=True)
class FrameBundle:
    I0: np.ndarray
    I1: np.ndarray
    H: np.ndarray
    pose: MotionSE3
    coverage_fraction: float

    @property
    def albedo(self) -> AlbedoPair:
        return AlbedoPair(self.I0, self.I1, (self.I1 != self.I0).any(axis=0).astype(np.float64))


def render_albedo_pair(
    scene: Scene, pose: MotionSE3, intr: CameraIntrinsics, patch_px: tuple[int, int] = (32, 32)
) -> FrameBundle:
    """Black/white board renders and the board homography for ``(w_p, h_p)`` texels."""
    H = geo.homography_for_plane(pose, scene.patch, intr, patch_px)
    rc = _raycast(scene, pose, intr)
    I0 = rc.color.copy()
    I1 = rc.color.copy()
    s = rc.shade[rc.board]
    I0[:, rc.board] = s * scene.albedo_lo[:, None]
    I1[:, rc.board] = s * scene.albedo_hi[:, None]
    I0, I1 = to_float32_precision(I0), to_float32_precision(I1)
    return FrameBundle(I0, I1, H, pose, float(rc.board.mean()))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectorySpec:
    initial_pose: MotionSE3
    speed: float = 1.0  # m/s along the optical axis
    yaw_rate_deg: float = 0.0  # deg/s about world z
    n_frames: int = 12
    fps: float = 10.0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("a trajectory needs at least 2 frames")
        if self.fps <= 0:
            raise ValueError("fps must be positive")


@dataclass
class Trajectory:
    frames: list
    gt_motions: list
    id: str = "traj"
    group: int = 0
    spec: dict = field(default_factory=dict)
    prior_plane: Optional[tuple] = None  # (point, normal) of the dominant scene plane

    @property
    def length(self) -> int:
        return len(self.gt_motions)

    @property
    def poses(self) -> list:
        return [f.pose for f in self.frames]

    @property
    def gt_scales(self) -> np.ndarray:
        return np.array([np.linalg.norm(m.translation) for m in self.gt_motions])

    def prior_inverse_depth(self, intr: CameraIntrinsics, fallback_depth: float) -> Optional[np.ndarray]:
        """``(L, H, W)`` inverse depth of the prior plane from the first frame of every pair."""
        if self.prior_plane is None:
            return None
        point, normal = self.prior_plane
        return np.stack(
            [geo.plane_inverse_depth(intr, f.pose, point, normal, fallback_depth) for f in self.frames[:-1]]
        )


def integrate_poses(spec: TrajectorySpec) -> list:
    """Constant-speed, constant-yaw-rate kinematics sampled at ``fps``."""
    dt = 1.0 / spec.fps
    step_rot = geo.rot_z(math.radians(spec.yaw_rate_deg) * dt)
    pose = spec.initial_pose
    poses = [pose]
    for _ in range(spec.n_frames - 1):
        forward = pose.R[:, 2]
        pose = MotionSE3(step_rot * pose.rotation, pose.translation + spec.speed * dt * forward)
        poses.append(pose)
    return poses


def generate_trajectory(
    scene: Scene,
    spec: TrajectorySpec,
    intr: CameraIntrinsics,
    patch_px: tuple[int, int] = (32, 32),
    traj_id: str = "traj",
    group: int = 0,
) -> Trajectory:
    poses = integrate_poses(spec)
    frames = [render_albedo_pair(scene, p, intr, patch_px) for p in poses]
    gt = [geo.relative_motion(a, b) for a, b in zip(poses[:-1], poses[1:])]
    meta = {
        "speed": spec.speed,
        "yaw_rate_deg": spec.yaw_rate_deg,
        "n_frames": spec.n_frames,
        "fps": spec.fps,
    }
    plane = (scene.patch.center.copy(), scene.patch.normal.copy())
    return Trajectory(frames, gt, traj_id, group, meta, plane)


@dataclass
class DatasetSpec:
    """Desk-scale defaults: the full-size layout shrunk tenfold."""

    width: int = 128
    height: int = 96
    hfov_deg: float = 80.0
    n_groups: int = 10
    per_group: int = 2
    n_frames: int = 12
    fps: float = 10.0
    speed: float = 1.0
    yaw_rate_std_deg: float = 3.0
    cone_axis: float = 5.0
    cone_half_angle_deg: float = 10.0
    patch_size: float = 3.0
    patch_px: tuple = (32, 32)
    scene_seed: int = 0

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_hfov(self.width, self.height, self.hfov_deg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_px"] = list(self.patch_px)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        if "patch_px" in d:
            d["patch_px"] = tuple(d["patch_px"])
        return cls(**d)


def scene_for(spec: DatasetSpec) -> Scene:
    return default_scene(spec.scene_seed, spec.patch_size)


def cone_ring_positions(scene: Scene, n: int, axis_length: float, half_angle_deg: float) -> np.ndarray:
    """``n`` points evenly spaced on the cone ring around the board normal."""
    normal = -scene.patch.normal if scene.patch.normal @ np.array([0, -1.0, 0]) < 0 else scene.patch.normal
    apex = scene.patch.center
    radius = axis_length * math.tan(math.radians(half_angle_deg))
    e1 = scene.patch.basis_u
    e2 = np.cross(normal, e1)
    ang = 2.0 * np.pi * np.arange(n) / n
    return apex + axis_length * normal + radius * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)


def generate_dataset(scene: Scene, spec: DatasetSpec, seed: int) -> list:
    """``n_groups * per_group`` trajectories starting on the cone ring, looking at the board."""
    if spec.n_groups < 1:
        raise ValueError("need at least one initial-position group")
    rng = np.random.default_rng(seed)
    intr = spec.intrinsics
    starts = cone_ring_positions(scene, spec.n_groups, spec.cone_axis, spec.cone_half_angle_deg)
    out = []
    for g, start in enumerate(starts):
        for k in range(spec.per_group):
            yaw = float(rng.normal(0.0, spec.yaw_rate_std_deg))
            tspec = TrajectorySpec(geo.look_at(start, scene.patch.center), spec.speed, yaw, spec.n_frames, spec.fps)
            out.append(generate_trajectory(scene, tspec, intr, spec.patch_px, f"g{g:02d}_t{k:02d}", g))
    return out


# ---------------------------------------------------------------------------
# Dataset persistence
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def save_trajectory(traj: Trajectory, directory) -> Path:
    d = Path(directory) / traj.id
    d.mkdir(parents=True, exist_ok=True)
    for t, fb in enumerate(traj.frames):
        save_float_image(d / f"I0_{t:04d}.vpf", fb.I0)
        save_float_image(d / f"I1_{t:04d}.vpf", fb.I1)
    with open(d / "homographies.txt", "w") as fh:
        for fb in traj.frames:
            fh.write(" ".join(_fmt(v) for v in fb.H.ravel()) + "\n")
    with open(d / "poses.txt", "w") as fh:
        for fb in traj.frames:
            fh.write(" ".join(_fmt(v) for v in (*fb.pose.rotation.quat, *fb.pose.translation)) + "\n")
    with open(d / "gt_motions.txt", "w") as fh:
        for m in traj.gt_motions:
            fh.write(" ".join(_fmt(v) for v in (*m.rotation.quat, *m.translation)) + "\n")
    manifest = {
        "id": traj.id,
        "group": traj.group,
        "n_frames": len(traj.frames),
        "coverage": [fb.coverage_fraction for fb in traj.frames],
        "spec": traj.spec,
        "prior_plane": None
        if traj.prior_plane is None
        else {"point": [float(v) for v in traj.prior_plane[0]], "normal": [float(v) for v in traj.prior_plane[1]]},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def _read_table(path) -> np.ndarray:
    rows = [[float(v) for v in line.split()] for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array(rows)


def _motion_from_row(row) -> MotionSE3:
    return MotionSE3(geo.RotationSO3.from_canonical(row[:4]), row[4:])


def load_trajectory(directory) -> Trajectory:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    hs = _read_table(d / "homographies.txt")
    poses = _read_table(d / "poses.txt")
    gts = _read_table(d / "gt_motions.txt").reshape(-1, 7)
    frames = []
    for t in range(manifest["n_frames"]):
        frames.append(
            FrameBundle(
                load_float_image(d / f"I0_{t:04d}.vpf"),
                load_float_image(d / f"I1_{t:04d}.vpf"),
                hs[t].reshape(3, 3),
                _motion_from_row(poses[t]),
                float(manifest["coverage"][t]),
            )
        )
    plane = manifest.get("prior_plane")
    if plane is not None:
        plane = (np.array(plane["point"]), np.array(plane["normal"]))
    gt = [_motion_from_row(r) for r in gts]
    return Trajectory(frames, gt, manifest["id"], manifest["group"], manifest["spec"], plane)


def save_dataset(trajs: list, spec: DatasetSpec, directory, seed: int) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for traj in trajs:
        save_trajectory(traj, root)
    index = {"seed": seed, "spec": spec.to_dict(), "trajectories": [t.id for t in trajs]}
    (root / "dataset.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return root


def load_dataset(directory):
    """Returns ``(trajectories, spec, seed)``."""
    root = Path(directory)
    index = json.loads((root / "dataset.json").read_text())
    trajs = [load_trajectory(root / tid) for tid in index["trajectories"]]
    return trajs, DatasetSpec.from_dict(index["spec"]), index["seed"]


def load_dataset_spec(directory) -> DatasetSpec:
    index = json.loads((Path(directory) / "dataset.json").read_text())
    return DatasetSpec.from_dict(index["spec"])
