"""Trajectory-deviation criteria over accumulated translations.

All three criteria compare the translation of the accumulated estimated
motion with the accumulated ground truth:

* ``l_vo``    -- deviation of the full trajectory endpoint;
* ``l_rms``   -- sum of ``l_vo`` over every prefix sharing the origin;
* ``l_mprms`` -- for each window length, the mean ``l_vo`` over all windows
  of that length, summed over lengths.

Estimated motions may be given as a list of :class:`MotionSE3` or as a pair
of tensors ``(R (L, 3, 3), t (L, 3))``; in the latter case the result is a
tensor on the active tape.
"""
from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .geometry import MotionSE3, RotationSO3


class LengthMismatch(ValueError):
    pass


class EmptyTrajectory(ValueError):
    pass


class CriterionKind(str, enum.Enum):
    VO = "vo"
    RMS = "rms"
    MPRMS = "mprms"


def motions_to_arrays(motions: Sequence[MotionSE3]) -> tuple[np.ndarray, np.ndarray]:
    if len(motions) == 0:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    return np.stack([m.R for m in motions]), np.stack([m.translation for m in motions])


def arrays_to_motions(rot: np.ndarray, t: np.ndarray) -> list:
    return [MotionSE3(RotationSO3.from_matrix(r), q) for r, q in zip(rot, t)]


def _as_pair(motions):
    if isinstance(motions, tuple) and len(motions) == 2 and not isinstance(motions[0], MotionSE3):
        rot, t = motions
        return ad.as_tensor(rot), ad.as_tensor(t)
    rot, t = motions_to_arrays(list(motions))
    return ad.Tensor(rot), ad.Tensor(t)


def _window_endpoints(rot, t, max_start: int | None = None):
    """Accumulated translations of every window, grouped by length.

    Yields, for ``l = 1..L``, a tensor ``(n_l, 3)`` whose row ``i`` is the
    translation of ``motions[i] * ... * motions[i + l - 1]``. Only starts
    ``i <= max_start`` are kept (all starts when None).
    """
    n_motions = rot.shape[0]
    last = n_motions - 1 if max_start is None else max_start
    acc_r = None
    acc_t = None
    for length in range(1, n_motions + 1):
        n_starts = min(last, n_motions - length) + 1
        r_next = rot[length - 1 : length - 1 + n_starts]
        t_next = t[length - 1 : length - 1 + n_starts]
        if acc_r is None:
            acc_r, acc_t = r_next, t_next
        else:
            acc_r, acc_t = acc_r[:n_starts], acc_t[:n_starts]
            acc_t = ad.add(acc_t, ad.reshape(ad.matmul(acc_r, ad.reshape(t_next, (n_starts, 3, 1))), (n_starts, 3)))
            acc_r = ad.matmul(acc_r, r_next)
        yield acc_t


def _window_deviations(est, gt, max_start=None) -> list:
    rot_e, t_e = _as_pair(est)
    rot_g, t_g = _as_pair(gt)
    if rot_e.shape[0] != rot_g.shape[0]:
        raise LengthMismatch(f"{rot_e.shape[0]} estimated vs {rot_g.shape[0]} ground-truth motions")
    if rot_e.shape[0] == 0:
        raise EmptyTrajectory("criteria need at least one motion")
    out = []
    for end_e, end_g in zip(_window_endpoints(rot_e, t_e, max_start), _window_endpoints(rot_g, t_g, max_start)):
        out.append(ad.l2_norm(ad.sub(end_e, end_g.data), axis=-1))
    return out


def _finish(value, est):
    return value if isinstance(est, tuple) and not isinstance(est[0], MotionSE3) else float(value.data)


def l_vo(est, gt):
    """Endpoint translation deviation in meters."""
    devs = _window_deviations(est, gt, max_start=0)
    return _finish(ad.reshape(devs[-1], ()), est)


def l_rms(est, gt):
    """Sum of prefix endpoint deviations."""
    devs = _window_deviations(est, gt, max_start=0)
    return _finish(ad.sum(ad.concat(devs)), est)


def l_mprms(est, gt):
    """Sum over window lengths of the mean window deviation."""
    devs = _window_deviations(est, gt)
    return _finish(ad.sum(ad.stack([ad.mean(d) for d in devs])), est)


CRITERIA = {CriterionKind.VO: l_vo, CriterionKind.RMS: l_rms, CriterionKind.MPRMS: l_mprms}


def criterion(kind) -> callable:
    return CRITERIA[CriterionKind(kind)]


def prefix_deviations(est, gt) -> np.ndarray:
    """``l_vo`` of every prefix, lengths ``1..L`` (numpy, no tape)."""
    return np.concatenate([d.data for d in _window_deviations(est, gt, max_start=0)])


def evaluate_all(est, gt, kinds) -> dict:
    """Several criteria from one window enumeration (tensors in, tensors out)."""
    kinds = [CriterionKind(k) for k in kinds]
    need_all = CriterionKind.MPRMS in kinds
    devs = _window_deviations(est, gt, max_start=None if need_all else 0)
    out = {}
    for kind in kinds:
        if kind is CriterionKind.VO:
            out[kind] = ad.reshape(devs[-1][0], ())
        elif kind is CriterionKind.RMS:
            out[kind] = ad.sum(ad.concat([d[0:1] for d in devs]))
        else:
            out[kind] = ad.sum(ad.stack([ad.mean(d) for d in devs]))
    return out
