"""Differentiable direct visual odometry used as the attack target.

:class:`DirectAlignmentVO` estimates the motion between two frames by
coarse-to-fine photometric Gauss-Newton over a 6-dof twist. Depth comes
from a planar prior: an inverse-depth map of the known scene plane, or a
fronto-parallel plane at ``plane_depth`` when none is given (the true scale
is supplied afterwards, see :func:`rescale_translation`). Residuals are
reweighted with pseudo-Huber IRLS weights and the damped normal equations
are solved a fixed number of times per pyramid level. Every step runs on the
autodiff tape, so estimated motions are differentiable w.r.t. the input
pixels.

The pair loop is batched: all pairs of a trajectory are aligned at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .geometry import CameraIntrinsics, MotionSE3, RotationSO3
from .imaging import luminance


class DegenerateNormalEquations(RuntimeError):
    """The damped Gauss-Newton system is numerically singular."""

    def __init__(self, message: str, pair_index: Optional[int] = None):
        super().__init__(message if pair_index is None else f"pair {pair_index}: {message}")
        self.pair_index = pair_index


_HAT = np.zeros((3, 9))
# hat(w).ravel() == w @ _HAT
_HAT[0, 5], _HAT[0, 7] = -1.0, 1.0
_HAT[1, 2], _HAT[1, 6] = 1.0, -1.0
_HAT[2, 1], _HAT[2, 3] = -1.0, 1.0


def se3_exp_tensor(xi) -> tuple:
    """Batched twist exponential ``(B, 6) -> (R (B, 3, 3), t (B, 3))`` on the tape."""
    xi = ad.as_tensor(xi)
    b = xi.shape[0]
    v = xi[:, :3]
    w = xi[:, 3:]
    coeffs = ad.rodrigues_coeffs(ad.sum(ad.square(w), axis=-1))
    wx = ad.reshape(ad.matmul(w, _HAT), (b, 3, 3))
    wx2 = ad.matmul(wx, wx)
    ca = ad.reshape(coeffs[:, 0], (b, 1, 1))
    cb = ad.reshape(coeffs[:, 1], (b, 1, 1))
    cc = ad.reshape(coeffs[:, 2], (b, 1, 1))
    eye = np.eye(3)
    rot = eye + ca * wx + cb * wx2
    vmat = eye + cb * wx + cc * wx2
    t = ad.reshape(ad.matmul(vmat, ad.reshape(v, (b, 3, 1))), (b, 3))
    return rot, t


def downsample(img):
    """2x2 box average of ``(B, H, W)`` data."""
    b, h, w = img.shape
    return ad.mul(ad.sum(ad.reshape(img, (b, h // 2, 2, w // 2, 2)), axis=(2, 4)), 0.25)


@dataclass(frozen=True)
class _LevelGeometry:
    intr: CameraIntrinsics
    rays: np.ndarray  # (N, 3) normalized rays (z = 1) of the interior pixels
    du_rot: np.ndarray  # (N, 3) d(pixel u)/d(rotation) at identity
    dv_rot: np.ndarray


def _level_geometry(intr: CameraIntrinsics) -> _LevelGeometry:
    xs, ys = np.meshgrid(np.arange(1, intr.width - 1.0), np.arange(1, intr.height - 1.0))
    xn = ((xs - intr.cx) / intr.fx).ravel()
    yn = ((ys - intr.cy) / intr.fy).ravel()
    rays = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    du_rot = intr.fx * np.stack([-xn * yn, 1.0 + xn * xn, -yn], axis=-1)
    dv_rot = intr.fy * np.stack([-(1.0 + yn * yn), xn * yn, xn], axis=-1)
    return _LevelGeometry(intr, rays, du_rot, dv_rot)


def _level_jacobians(geom: _LevelGeometry, inv_depth: np.ndarray):
    """Template points ``(B, N, 3)`` and pixel Jacobians ``(B, N, 6)`` for depths ``1 / inv_depth``."""
    intr = geom.intr
    rho = inv_depth[:, 1:-1, 1:-1].reshape(inv_depth.shape[0], -1)
    xn, yn = geom.rays[:, 0], geom.rays[:, 1]
    zero = np.zeros_like(rho)
    points = geom.rays[None] / rho[..., None]
    du = np.concatenate([np.stack([intr.fx * rho, zero, -intr.fx * xn * rho], axis=-1),
                         np.broadcast_to(geom.du_rot, rho.shape + (3,))], axis=-1)
    dv = np.concatenate([np.stack([zero, intr.fy * rho, -intr.fy * yn * rho], axis=-1),
                         np.broadcast_to(geom.dv_rot, rho.shape + (3,))], axis=-1)
    return points, du, dv


def _downsample_np(a: np.ndarray) -> np.ndarray:
    b, h, w = a.shape
    return a.reshape(b, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


class DirectAlignmentVO(BaseEstimator):
    """Unrolled coarse-to-fine photometric Gauss-Newton VO.

    Parameters
    ----------
    intrinsics : CameraIntrinsics
        Camera of the input frames.
    pyramid_levels : int
        Number of 2x2 box-filtered levels, coarsest aligned first.
    gn_iterations : int
        Gauss-Newton steps per level (no convergence test).
    damping : float
        Levenberg-Marquardt factor: the normal matrix diagonal is scaled by
        ``1 + damping``.
    huber_delta : float
        Pseudo-Huber scale of the photometric residual (intensity units).
    plane_depth : float
        Depth (meters) of the fronto-parallel scene prior.
    skip_levels : int
        Finest pyramid levels left out of the alignment.
    """

    def __init__(
        self,
        intrinsics: Optional[CameraIntrinsics] = None,
        pyramid_levels: int = 3,
        gn_iterations: int = 10,
        damping: float = 1e-3,
        huber_delta: float = 0.1,
        plane_depth: float = 5.0,
        skip_levels: int = 0,
        max_condition: float = 1e12,
    ):
        self.intrinsics = intrinsics
        self.pyramid_levels = pyramid_levels
        self.gn_iterations = gn_iterations
        self.damping = damping
        self.huber_delta = huber_delta
        self.plane_depth = plane_depth
        self.skip_levels = skip_levels
        self.max_condition = max_condition

    # -- configuration -----------------------------------------------------

    def check_params(self) -> None:
        """Raise ValueError on out-of-range hyperparameters."""
        if self.pyramid_levels < 1 or self.gn_iterations < 1:
            raise ValueError("pyramid_levels and gn_iterations must be >= 1")
        if self.damping <= 0 or self.huber_delta <= 0 or self.plane_depth <= 0:
            raise ValueError("damping, huber_delta and plane_depth must be positive")
        if not 0 <= self.skip_levels < self.pyramid_levels:
            raise ValueError("skip_levels must leave at least one level")

    def _validate(self, shape: tuple[int, int]) -> list:
        if self.intrinsics is None:
            raise ValueError("DirectAlignmentVO needs camera intrinsics")
        self.check_params()
        h, w = shape
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError(f"frames are {w}x{h}, intrinsics expect {self.intrinsics.width}x{self.intrinsics.height}")
        factor = 2 ** (self.pyramid_levels - 1)
        if h % factor or w % factor:
            raise ValueError(f"frame size {w}x{h} must be divisible by {factor}")
        key = (self.intrinsics, self.pyramid_levels)
        cache = getattr(self, "_geometry_cache", None)
        if cache is None or cache[0] != key:
            levels, intr = [], self.intrinsics
            for _ in range(self.pyramid_levels):
                levels.append(_level_geometry(intr))
                intr = intr.downsample(2)
            self._geometry_cache = (key, levels)
        return self._geometry_cache[1]

    # -- tape-level estimation ---------------------------------------------

    def twists(self, gray_a, gray_b, inv_depth=None):
        """Final alignment twists ``(B, 6)`` mapping frame-a points into frame b.

        ``inv_depth`` is the ``(B, H, W)`` inverse-depth prior of the frame-a
        pixels; by default every pixel lies at ``plane_depth``.
        """
        gray_a, gray_b = ad.as_tensor(gray_a), ad.as_tensor(gray_b)
        levels = self._validate(gray_a.shape[-2:])
        b = gray_a.shape[0]
        if inv_depth is None:
            inv_depth = np.full(gray_a.shape, 1.0 / self.plane_depth)
        inv_depth = np.asarray(inv_depth, dtype=np.float64)
        if inv_depth.shape != gray_a.shape or not np.all(inv_depth > 0):
            raise ValueError("inverse depth must be positive and shaped like the frames")
        pyr_a, pyr_b, pyr_d = [gray_a], [gray_b], [inv_depth]
        for _ in range(self.pyramid_levels - 1):
            pyr_a.append(downsample(pyr_a[-1]))
            pyr_b.append(downsample(pyr_b[-1]))
            pyr_d.append(_downsample_np(pyr_d[-1]))
        damp = np.ones((6, 6)) + self.damping * np.eye(6)
        xi = ad.Tensor(np.zeros((b, 6)))
        for lvl in range(self.pyramid_levels - 1, self.skip_levels - 1, -1):
            geom = levels[lvl]
            img_a, img_b = pyr_a[lvl], pyr_b[lvl]
            points, du, dv = _level_jacobians(geom, pyr_d[lvl])
            n = points.shape[1]
            gx = ad.reshape(ad.mul(ad.sub(img_a[:, 1:-1, 2:], img_a[:, 1:-1, :-2]), 0.5), (b, n, 1))
            gy = ad.reshape(ad.mul(ad.sub(img_a[:, 2:, 1:-1], img_a[:, :-2, 1:-1]), 0.5), (b, n, 1))
            jac = ad.add(ad.mul(gx, du), ad.mul(gy, dv))  # (B, N, 6)
            jac_t = ad.swapaxes(jac, 1, 2)
            template = ad.reshape(img_a[:, 1:-1, 1:-1], (b, n))
            intr = geom.intr
            for _ in range(self.gn_iterations):
                rot, t = se3_exp_tensor(xi)
                warped = ad.add(ad.matmul(points, ad.swapaxes(rot, 1, 2)), ad.reshape(t, (b, 1, 3)))
                u, v = ad.pinhole_project(warped, intr.fx, intr.fy, intr.cx, intr.cy)
                resid = ad.sub(ad.sample_xy(img_b, u, v), template)
                wts = ad.mul(ad.pseudo_huber_weight(resid, self.huber_delta), 1.0 / n)
                jw_t = ad.mul(jac_t, ad.reshape(wts, (b, 1, n)))
                normal = ad.mul(ad.matmul(jw_t, jac), damp)
                rhs = ad.reshape(ad.matmul(jw_t, ad.reshape(resid, (b, n, 1))), (b, 6))
                self._check_conditioning(normal.data)
                xi = ad.sub(xi, ad.solve(normal, rhs))
        return xi

    def _check_conditioning(self, normal: np.ndarray) -> None:
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = np.linalg.cond(normal)
        bad = ~(cond <= self.max_condition)
        if bad.any():
            k = int(np.argmax(bad))
            raise DegenerateNormalEquations(f"normal equations condition {cond[k]:.3g}", pair_index=k)

    def motion_tensors(self, frames, gt_scales=None, inv_depth=None) -> tuple:
        """Per-pair motions of an RGB frame stack ``(L+1, 3, H, W)``.

        Returns ``(R (L, 3, 3), t (L, 3))`` tensors; with ``gt_scales`` the
        translations are rescaled to those norms. ``inv_depth`` holds the
        ``(L, H, W)`` prior of the first frame of every pair.
        """
        gray = luminance(ad.as_tensor(frames))
        xi = self.twists(gray[:-1], gray[1:], inv_depth)
        rot, t = se3_exp_tensor(ad.neg(xi))
        if gt_scales is not None:
            t = rescale_translation_tensor(t, gt_scales)
        return rot, t

    # -- numpy API -----------------------------------------------------------

    def estimate_pair(self, img_a: np.ndarray, img_b: np.ndarray, inv_depth=None) -> MotionSE3:
        """Camera motion from ``img_a`` to ``img_b`` (pose of b in the frame of a)."""
        prior = None if inv_depth is None else np.asarray(inv_depth)[None]
        return self.estimate_trajectory([img_a, img_b], prior)[0]

    def estimate_trajectory(self, frames: Sequence[np.ndarray], inv_depth=None) -> list:
        """Motions between consecutive frames, in order."""
        frames = np.stack([np.asarray(f, dtype=np.float64) for f in frames])
        if frames.shape[0] < 2:
            raise ValueError("a trajectory needs at least two frames")
        rot, t = self.motion_tensors(frames, inv_depth=inv_depth)
        return [MotionSE3(RotationSO3.from_matrix(r), q) for r, q in zip(rot.data, t.data)]

    def fit(self, X=None, y=None):
        self._validate((self.intrinsics.height, self.intrinsics.width))
        return self

    def predict(self, X) -> list:
        """Motion lists for a sequence of frame sequences."""
        return [self.estimate_trajectory(frames) for frames in X]


def rescale_translation_tensor(t, scales, eps: float = 1e-12):
    """Rescale each row of ``t (L, 3)`` to norm ``scales[k]``; zero rows stay zero."""
    t = ad.as_tensor(t)
    scales = np.asarray(scales, dtype=np.float64)
    norms = ad.l2_norm(t, axis=-1, keepdims=True)
    safe = ad.add(norms, (norms.data <= eps).astype(np.float64))
    factor = ad.div(scales[:, None] * (norms.data > eps), safe)
    return ad.mul(t, factor)


def rescale_translation(est: MotionSE3, gt_scale: float, eps: float = 1e-12) -> tuple[MotionSE3, bool]:
    """Scale the translation of ``est`` to norm ``gt_scale``.

    Returns the rescaled motion and a flag that is True when a zero-norm
    estimate could not be brought to a positive scale.
    """
    if gt_scale < 0:
        raise ValueError("gt_scale must be non-negative")
    q = est.translation
    norm = float(np.linalg.norm(q))
    if norm <= eps:
        return MotionSE3(est.rotation, np.zeros(3)), gt_scale > 0
    return MotionSE3(est.rotation, q * (gt_scale / norm)), False
