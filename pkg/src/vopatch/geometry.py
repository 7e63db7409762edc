"""Rigid-motion algebra, pinhole cameras and the patch-plane homography.

Conventions used throughout the package:

* A pose is a camera-to-world :class:`MotionSE3`; camera axes are x right,
  y down, z forward.
* The relative motion between consecutive poses is ``inv(pose_t) * pose_t1``,
  so accumulating relative motions left to right yields the last camera pose
  expressed in the first camera frame.
* Image pixel ``(row j, col i)`` has its center at continuous coordinate
  ``(x=i, y=j)``. Patch texel ``(j, i)`` has its center at ``(i + 0.5, j + 0.5)``
  in patch coordinates, which span ``[0, w_p] x [0, h_p]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Sequence

import numpy as np


class PlaneBehindCamera(ValueError):
    """A patch-plane corner has non-positive depth in the camera frame."""


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _canonical(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"invalid quaternion {q!r}")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def _quat_from_matrix(m: np.ndarray) -> np.ndarray:
    # Shepperd's method, picking the numerically largest pivot.
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return _canonical(np.array(q))


@dataclass(frozen=True)
class RotationSO3:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "quat", _canonical(self.quat))

    @classmethod
    def identity(cls) -> "RotationSO3":
        return cls()

    @classmethod
    def from_canonical(cls, quat) -> "RotationSO3":
        """Wrap an already normalized quaternion without touching its bits."""
        rot = cls()
        object.__setattr__(rot, "quat", np.array(quat, dtype=np.float64))
        return rot

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RotationSO3":
        return cls(_quat_from_matrix(m))

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle: float) -> "RotationSO3":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        return cls(np.concatenate([[math.cos(half)], math.sin(half) * axis]))

    @classmethod
    def from_rotvec(cls, rotvec: Sequence[float]) -> "RotationSO3":
        rotvec = np.asarray(rotvec, dtype=np.float64)
        angle = float(np.linalg.norm(rotvec))
        if angle < 1e-300:
            return cls()
        return cls.from_axis_angle(rotvec / angle, angle)

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.quat
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def angle(self) -> float:
        """Rotation angle in radians, in ``[0, pi]``."""
        return 2.0 * math.atan2(float(np.linalg.norm(self.quat[1:])), float(self.quat[0]))

    def __mul__(self, other: "RotationSO3") -> "RotationSO3":
        return RotationSO3(_quat_mul(self.quat, other.quat))

    def inverse(self) -> "RotationSO3":
        return RotationSO3(self.quat * np.array([1.0, -1.0, -1.0, -1.0]))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.as_matrix() @ np.asarray(v, dtype=np.float64)


def rot_x(angle: float) -> RotationSO3:
    return RotationSO3.from_axis_angle([1.0, 0.0, 0.0], angle)


def rot_y(angle: float) -> RotationSO3:
    return RotationSO3.from_axis_angle([0.0, 1.0, 0.0], angle)


def rot_z(angle: float) -> RotationSO3:
    return RotationSO3.from_axis_angle([0.0, 0.0, 1.0], angle)


# ---------------------------------------------------------------------------
# Rigid motions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MotionSE3:
    """Rigid motion ``(R, q)``; acts on points as ``x -> R x + q``."""

    rotation: RotationSO3 = field(default_factory=RotationSO3)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation {t!r}")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "MotionSE3":
        return cls()

    @classmethod
    def from_matrix4(cls, m: np.ndarray) -> "MotionSE3":
        m = np.asarray(m, dtype=np.float64)
        return cls(RotationSO3.from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rt(cls, r: np.ndarray, t: Sequence[float]) -> "MotionSE3":
        return cls(RotationSO3.from_matrix(r), t)

    def to_matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    @property
    def R(self) -> np.ndarray:
        return self.rotation.as_matrix()

    @property
    def q(self) -> np.ndarray:
        return self.translation

    def __matmul__(self, other: "MotionSE3") -> "MotionSE3":
        return compose(self, other)

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        """Apply to an ``(..., 3)`` array of points."""
        return np.asarray(pts) @ self.R.T + self.translation


def compose(a: MotionSE3, b: MotionSE3) -> MotionSE3:
    """Product ``a * b`` of the homogeneous 4x4 representations."""
    return MotionSE3(a.rotation * b.rotation, a.rotation.apply(b.translation) + a.translation)


def accumulate(motions: Iterable[MotionSE3]) -> MotionSE3:
    """Left fold of :func:`compose` starting from the identity."""
    return reduce(compose, motions, MotionSE3.identity())


def translation(m: MotionSE3) -> np.ndarray:
    return m.translation


def invert(m: MotionSE3) -> MotionSE3:
    r_inv = m.rotation.inverse()
    return MotionSE3(r_inv, -r_inv.apply(m.translation))


def relative_motion(pose_a: MotionSE3, pose_b: MotionSE3) -> MotionSE3:
    """Motion of camera ``b`` expressed in the frame of camera ``a``."""
    return compose(invert(pose_a), pose_b)


def hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def se3_exp(xi: Sequence[float]) -> MotionSE3:
    """Exponential of a twist ``(v, w)``: translation part first, rotation second."""
    xi = np.asarray(xi, dtype=np.float64)
    v, w = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    wx = hat(w)
    if theta < 1e-8:
        b, c = 0.5, 1.0 / 6.0
    else:
        b = (1.0 - math.cos(theta)) / theta**2
        c = (theta - math.sin(theta)) / theta**3
    v_mat = np.eye(3) + b * wx + c * (wx @ wx)
    return MotionSE3(RotationSO3.from_rotvec(w), v_mat @ v)


def se3_log(m: MotionSE3) -> np.ndarray:
    """Inverse of :func:`se3_exp` for rotation angles below pi."""
    theta = m.rotation.angle()
    vec = m.rotation.quat[1:]
    n = np.linalg.norm(vec)
    w = np.zeros(3) if n == 0.0 else vec / n * theta
    wx = hat(w)
    if theta < 1e-8:
        v_inv = np.eye(3) - 0.5 * wx
    else:
        coef = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta**2
        v_inv = np.eye(3) - 0.5 * wx + coef * (wx @ wx)
    return np.concatenate([v_inv @ m.translation, w])


def look_at(position: Sequence[float], target: Sequence[float], up=(0.0, 0.0, 1.0)) -> MotionSE3:
    """Camera-to-world pose at ``position`` whose optical axis points at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise ValueError("viewing direction is parallel to the up vector")
    right /= norm
    down = np.cross(forward, right)
    return MotionSE3.from_rt(np.column_stack([right, down, forward]), position)


def heading(pose: MotionSE3) -> float:
    """Yaw (radians, about world z) of the camera's optical axis."""
    f = pose.R[:, 2]
    return math.atan2(f[1], f[0])


# ---------------------------------------------------------------------------
# Cameras and the patch plane
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_hfov(cls, width: int, height: int, hfov_deg: float = 80.0) -> "CameraIntrinsics":
        f = 0.5 * width / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    @property
    def hfov_deg(self) -> float:
        return math.degrees(2.0 * math.atan(0.5 * self.width / self.fx))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def downsample(self, factor: int = 2) -> "CameraIntrinsics":
        """Intrinsics of a ``factor x factor`` box-averaged image."""
        off = (factor - 1) / 2.0
        return CameraIntrinsics(
            self.fx / factor,
            self.fy / factor,
            (self.cx - off) / factor,
            (self.cy - off) / factor,
            self.width // factor,
            self.height // factor,
        )

    def project(self, pts_cam: np.ndarray) -> np.ndarray:
        pts_cam = np.asarray(pts_cam, dtype=np.float64)
        z = pts_cam[..., 2]
        return np.stack(
            [self.fx * pts_cam[..., 0] / z + self.cx, self.fy * pts_cam[..., 1] / z + self.cy], axis=-1
        )

    def pixel_rays(self) -> np.ndarray:
        """Unnormalized camera-frame ray directions ``(H, W, 3)`` with unit z."""
        xs = (np.arange(self.width) - self.cx) / self.fx
        ys = (np.arange(self.height) - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy, np.ones_like(gx)], axis=-1)


@dataclass(frozen=True)
class PatchPlane:
    """Rectangle in world space carrying the patch texture.

    ``origin`` is the world position of patch coordinate ``(0, 0)``;
    ``basis_u``/``basis_v`` are orthonormal directions along which the patch
    extends by ``extent_u``/``extent_v`` meters.
    """

    origin: np.ndarray
    basis_u: np.ndarray
    basis_v: np.ndarray
    extent_u: float
    extent_v: float

    def __post_init__(self):
        for name in ("origin", "basis_u", "basis_v"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(3)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if abs(float(self.basis_u @ self.basis_v)) > 1e-9:
            raise ValueError("patch basis vectors must be orthogonal")
        if self.extent_u <= 0 or self.extent_v <= 0:
            raise ValueError("patch extents must be positive")

    @classmethod
    def centered(cls, center, basis_u, basis_v, extent_u, extent_v=None) -> "PatchPlane":
        extent_v = extent_u if extent_v is None else extent_v
        bu = np.asarray(basis_u, dtype=np.float64)
        bv = np.asarray(basis_v, dtype=np.float64)
        bu, bv = bu / np.linalg.norm(bu), bv / np.linalg.norm(bv)
        origin = np.asarray(center, dtype=np.float64) - 0.5 * extent_u * bu - 0.5 * extent_v * bv
        return cls(origin, bu, bv, extent_u, extent_v)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.basis_u, self.basis_v)

    @property
    def center(self) -> np.ndarray:
        return self.origin + 0.5 * self.extent_u * self.basis_u + 0.5 * self.extent_v * self.basis_v

    def corners(self) -> np.ndarray:
        """World corners in patch-coordinate order (0,0), (w,0), (w,h), (0,h)."""
        du, dv = self.extent_u * self.basis_u, self.extent_v * self.basis_v
        return np.stack([self.origin, self.origin + du, self.origin + du + dv, self.origin + dv])

    def world_point(self, u, v, patch_px: tuple[int, int]):
        """World point of patch coordinate ``(u, v)`` for a ``(w_p, h_p)`` texture."""
        w_p, h_p = patch_px
        u = np.asarray(u, dtype=np.float64)[..., None]
        v = np.asarray(v, dtype=np.float64)[..., None]
        return (
            self.origin
            + (u / w_p) * self.extent_u * self.basis_u
            + (v / h_p) * self.extent_v * self.basis_v
        )


def homography_for_plane(
    camera_pose: MotionSE3,
    plane: PatchPlane,
    intr: CameraIntrinsics,
    patch_px: tuple[int, int],
) -> np.ndarray:
    """3x3 map from homogeneous patch coordinates to homogeneous image pixels."""
    w_p, h_p = patch_px
    r_wc = camera_pose.R.T
    p = camera_pose.translation
    depths = (plane.corners() - p) @ r_wc[2]
    if np.any(depths <= 0.0):
        raise PlaneBehindCamera(f"patch corner depths {depths} must be positive")
    cols = np.column_stack(
        [
            r_wc @ (plane.basis_u * plane.extent_u / w_p),
            r_wc @ (plane.basis_v * plane.extent_v / h_p),
            r_wc @ (plane.origin - p),
        ]
    )
    return intr.K @ cols


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply ``h`` to ``(..., 2)`` points, returning dehomogenized ``(..., 2)``."""
    pts = np.asarray(pts, dtype=np.float64)
    hom = pts @ h[:, :2].T + h[:, 2]
    return hom[..., :2] / hom[..., 2:3]


def plane_inverse_depth(
    intr: CameraIntrinsics, pose: MotionSE3, point: np.ndarray, normal: np.ndarray, fallback_depth: float
) -> np.ndarray:
    """``(H, W)`` inverse depth of the world plane through ``point`` seen from ``pose``.

    Pixels whose ray does not meet the plane in front of the camera get
    ``1 / fallback_depth``.
    """
    n_cam = pose.R.T @ np.asarray(normal, dtype=np.float64)
    dist = float(n_cam @ (pose.R.T @ (np.asarray(point, dtype=np.float64) - pose.translation)))
    rho = intr.pixel_rays() @ n_cam / dist if abs(dist) > 1e-12 else np.zeros((intr.height, intr.width))
    return np.where(rho > 0, rho, 1.0 / fallback_depth)
