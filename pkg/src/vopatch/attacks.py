"""Sign-gradient patch attacks: per-trajectory PGD and universal PGD.

Both attacks start from a seeded uniform patch, repeatedly step by
``alpha * sign(grad)`` of the training criterion, clip to ``[0, 1]`` and
evaluate the evaluation criterion on the new patch, keeping the patch with
the largest evaluation loss seen (the running best starts at 0).

The forward pass that evaluates an iterate on a training trajectory is the
same computation the next gradient needs, so it is recorded once and reused.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from . import criteria as cr
from .criteria import CriterionKind
from .imaging import load_float_image, patch_sampler, save_float_image, shrink_mask
from .renderer import Trajectory
from .vo import DegenerateNormalEquations, DirectAlignmentVO


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 0.05
    K: int = 100
    train_criterion: CriterionKind = CriterionKind.RMS
    eval_criterion: CriterionKind = CriterionKind.RMS
    seed: int = 0
    patch_dims: tuple = (32, 32)  # (h_p, w_p)
    shrink_fraction: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        if not 0.0 < self.shrink_fraction <= 1.0:
            raise ValueError(f"shrink_fraction must be in (0, 1], got {self.shrink_fraction}")
        object.__setattr__(self, "train_criterion", CriterionKind(self.train_criterion))
        object.__setattr__(self, "eval_criterion", CriterionKind(self.eval_criterion))
        object.__setattr__(self, "patch_dims", tuple(int(v) for v in self.patch_dims))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_criterion"] = self.train_criterion.value
        d["eval_criterion"] = self.eval_criterion.value
        d["patch_dims"] = list(self.patch_dims)
        return d


@dataclass
class AttackResult:
    best_patch: np.ndarray
    best_eval_loss: float
    train_history: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)
    best_iteration: int = -1  # -1: no iterate beat the initial 0
    error: Optional[str] = None

    def save(self, directory, name: str = "patch") -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        img = d / f"{name}.vpf"
        save_float_image(img, self.best_patch.transpose(1, 2, 0))
        table = d / f"{name}_losses.csv"
        with open(table, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "train_loss", "eval_loss"])
            for k, (lt, le) in enumerate(zip(self.train_history, self.eval_history)):
                w.writerow([k, repr(float(lt)), repr(float(le))])
        return img, table

    @classmethod
    def load(cls, directory, name: str = "patch") -> "AttackResult":
        d = Path(directory)
        patch = load_float_image(d / f"{name}.vpf").transpose(2, 0, 1)
        train, evals = [], []
        with open(d / f"{name}_losses.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                train.append(float(row["train_loss"]))
                evals.append(float(row["eval_loss"]))
        best = max(evals, default=0.0)
        best_it = int(np.argmax(evals)) if evals and best > 0 else -1
        return cls(patch, max(best, 0.0), train, evals, best_it)


# ---------------------------------------------------------------------------
# Trajectory preparation and losses
# ---------------------------------------------------------------------------


class PreparedTrajectory:
    """Arrays needed to composite a patch into every frame and score the VO."""

    def __init__(self, traj: Trajectory, vo: DirectAlignmentVO, patch_dims: tuple[int, int]):
        intr = vo.intrinsics
        out_dims = (intr.height, intr.width)
        self.traj = traj
        self.out_dims = out_dims
        self.I0 = np.stack([f.I0 for f in traj.frames])
        self.contrast = np.stack([f.I1 - f.I0 for f in traj.frames])
        self.sampler = ad.BilinearSampler.vstack([patch_sampler(f.H, out_dims, patch_dims) for f in traj.frames])
        self.gt = cr.motions_to_arrays(traj.gt_motions)
        self.gt_scales = traj.gt_scales
        self.inv_depth = traj.prior_inverse_depth(intr, vo.plane_depth)

    def composite(self, P):
        """Frames ``(L+1, 3, H, W)`` with ``P`` inserted (tensor in, tensor out)."""
        n = self.I0.shape[0]
        h, w = self.out_dims
        if isinstance(P, ad.Tensor):
            warped = ad.swapaxes(ad.reshape(ad.bilinear_sample(P, self.sampler), (P.shape[0], n, h, w)), 0, 1)
            return ad.add(ad.mul(warped, self.contrast), self.I0)
        warped = self.sampler.apply(np.asarray(P)).reshape(P.shape[0], n, h, w).swapaxes(0, 1)
        return warped * self.contrast + self.I0


def prepare(trajs: Sequence, vo: DirectAlignmentVO, patch_dims) -> list:
    return [t if isinstance(t, PreparedTrajectory) else PreparedTrajectory(t, vo, tuple(patch_dims)) for t in trajs]


def _losses(vo, prep: PreparedTrajectory, P, kinds) -> dict:
    est = vo.motion_tensors(prep.composite(P), prep.gt_scales, prep.inv_depth)
    return cr.evaluate_all(est, prep.gt, kinds)


def _loss_and_grad(vo, prep, P: np.ndarray, mask, train_kind, kinds):
    """Training-criterion gradient at ``P`` plus every criterion value."""
    leaf = ad.Tensor(P, requires_grad=True)
    with ad.Tape() as tape:
        applied = leaf if mask is None else ad.mul(leaf, mask)
        vals = _losses(vo, prep, applied, kinds)
    out = vals[train_kind]
    g = ad.backward(tape, out).get(leaf, np.zeros_like(P)) if out.requires_grad else np.zeros_like(P)
    return {k: float(v.data) for k, v in vals.items()}, g


def _values(vo, prep, P: np.ndarray, mask, kinds) -> dict:
    applied = P if mask is None else P * mask
    vals = _losses(vo, prep, ad.Tensor(applied), kinds)
    return {k: float(v.data) for k, v in vals.items()}


def patch_losses(vo, trajs: Sequence, patch: np.ndarray, kinds=(CriterionKind.VO,)) -> list:
    """Criterion values of ``patch`` on every trajectory (no gradients)."""
    preps = prepare(trajs, vo, patch.shape[-2:])
    kinds = [CriterionKind(k) for k in kinds]
    return [_values(vo, p, patch, None, kinds) for p in preps]


def prefix_deviations(vo, trajs: Sequence, patch: np.ndarray) -> np.ndarray:
    """``(n_traj, L)`` endpoint deviation of every prefix with ``patch`` inserted."""
    preps = prepare(trajs, vo, patch.shape[-2:])
    rows = []
    for p in preps:
        est = vo.motion_tensors(p.composite(patch), p.gt_scales, p.inv_depth)
        rows.append(cr.prefix_deviations(est, p.gt))
    return np.array(rows)


def initial_patch(cfg: AttackConfig) -> np.ndarray:
    return np.random.default_rng(cfg.seed).random((3,) + cfg.patch_dims)


def _mask(cfg: AttackConfig):
    return None if cfg.shrink_fraction == 1.0 else shrink_mask(cfg.patch_dims, cfg.shrink_fraction)


def _kinds(cfg: AttackConfig, eval_criteria) -> list:
    kinds = [cfg.train_criterion]
    for k in eval_criteria:
        if k not in kinds:
            kinds.append(k)
    return kinds


def _applied(P, mask):
    return P.copy() if mask is None else P * mask


_RECOVERABLE = (DegenerateNormalEquations, np.linalg.LinAlgError, FloatingPointError)


# ---------------------------------------------------------------------------
# Attacks
# ---------------------------------------------------------------------------


def pgd_attack(vo, trajectory, cfg: AttackConfig, eval_criteria: Optional[Sequence] = None) -> AttackResult:
    """Optimize a patch for a single trajectory.

    With ``eval_criteria`` the iterates are scored by every listed criterion
    and a dict of results keyed by criterion is returned instead.
    """
    multi = eval_criteria is not None
    evals = [CriterionKind(k) for k in eval_criteria] if multi else [cfg.eval_criterion]
    kinds = _kinds(cfg, evals)
    prep = prepare([trajectory], vo, cfg.patch_dims)[0]
    mask = _mask(cfg)
    P = initial_patch(cfg)
    best = {k: (0.0, _applied(P, mask), -1) for k in evals}
    train_hist, eval_hist = [], {k: [] for k in evals}
    error = None
    try:
        vals, g = _loss_and_grad(vo, prep, P, mask, cfg.train_criterion, kinds)
        for it in range(cfg.K):
            train_hist.append(vals[cfg.train_criterion])
            P = np.clip(P + cfg.alpha * np.sign(g), 0.0, 1.0)
            if it + 1 < cfg.K:
                vals, g = _loss_and_grad(vo, prep, P, mask, cfg.train_criterion, kinds)
            else:
                vals = _values(vo, prep, P, mask, kinds)
            for k in evals:
                eval_hist[k].append(vals[k])
                if vals[k] > best[k][0]:
                    best[k] = (vals[k], _applied(P, mask), it)
    except _RECOVERABLE as exc:
        error = f"iteration {len(train_hist)}: {exc}"
    out = {
        k: AttackResult(best[k][1], best[k][0], list(train_hist[: len(eval_hist[k])]), eval_hist[k], best[k][2], error)
        for k in evals
    }
    return out if multi else out[cfg.eval_criterion]


def universal_attack(
    vo, train: Sequence, eval_set: Sequence, cfg: AttackConfig, eval_criteria: Optional[Sequence] = None
) -> AttackResult:
    """Optimize one patch for a training set, selected on an evaluation set.

    Gradients of the training trajectories are summed in list order. With
    ``eval_criteria`` a dict of results keyed by criterion is returned.
    """
    if len(train) == 0 or len(eval_set) == 0:
        raise ValueError("training and evaluation sets must be non-empty")
    multi = eval_criteria is not None
    evals = [CriterionKind(k) for k in eval_criteria] if multi else [cfg.eval_criterion]
    kinds = _kinds(cfg, evals)
    train_p = prepare(train, vo, cfg.patch_dims)
    train_keys = [id(t) for t in train]
    eval_p = [
        train_p[train_keys.index(id(t))] if id(t) in train_keys else p
        for t, p in zip(eval_set, prepare(eval_set, vo, cfg.patch_dims))
    ]
    mask = _mask(cfg)
    P = initial_patch(cfg)
    best = {k: (0.0, _applied(P, mask), -1) for k in evals}
    train_hist, eval_hist = [], {k: [] for k in evals}
    cache: dict = {}
    error = None
    try:
        for it in range(cfg.K):
            g = np.zeros_like(P)
            total = 0.0
            for prep in train_p:
                if id(prep) in cache:
                    vals, gi = cache[id(prep)]
                else:
                    vals, gi = _loss_and_grad(vo, prep, P, mask, cfg.train_criterion, kinds)
                g = g + gi
                total = total + vals[cfg.train_criterion]
            train_hist.append(total)
            P = np.clip(P + cfg.alpha * np.sign(g), 0.0, 1.0)
            cache = {}
            sums = {k: 0.0 for k in evals}
            for prep in eval_p:
                if id(prep) in cache:
                    vals = cache[id(prep)][0]
                elif it + 1 < cfg.K and any(prep is p for p in train_p):
                    cache[id(prep)] = _loss_and_grad(vo, prep, P, mask, cfg.train_criterion, kinds)
                    vals = cache[id(prep)][0]
                else:
                    vals = _values(vo, prep, P, mask, kinds)
                for k in evals:
                    sums[k] = sums[k] + vals[k]
            for k in evals:
                eval_hist[k].append(sums[k])
                if sums[k] > best[k][0]:
                    best[k] = (sums[k], _applied(P, mask), it)
    except _RECOVERABLE as exc:
        error = f"iteration {len(train_hist)}: {exc}"
    out = {
        k: AttackResult(best[k][1], best[k][0], list(train_hist[: len(eval_hist[k])]), eval_hist[k], best[k][2], error)
        for k in evals
    }
    return out if multi else out[cfg.eval_criterion]


# ---------------------------------------------------------------------------
# Estimator interface
# ---------------------------------------------------------------------------


class UniversalPatchAttack(BaseEstimator):
    """``fit`` optimizes a universal patch; ``transform`` composites it.

    ``fit(X, eval_set=None)`` takes a list of trajectories (also used for
    selection when no evaluation set is given). ``transform`` returns the
    attacked frame stacks, ``predict`` the VO motion estimates and ``score``
    the mean evaluation criterion.
    """

    def __init__(
        self,
        vo: Optional[DirectAlignmentVO] = None,
        alpha: float = 0.05,
        K: int = 100,
        train_criterion: str = "rms",
        eval_criterion: str = "rms",
        seed: int = 0,
        patch_dims: tuple = (32, 32),
        shrink_fraction: float = 1.0,
    ):
        self.vo = vo
        self.alpha = alpha
        self.K = K
        self.train_criterion = train_criterion
        self.eval_criterion = eval_criterion
        self.seed = seed
        self.patch_dims = patch_dims
        self.shrink_fraction = shrink_fraction

    def config(self) -> AttackConfig:
        return AttackConfig(
            self.alpha, self.K, self.train_criterion, self.eval_criterion, self.seed, self.patch_dims,
            self.shrink_fraction,
        )

    def _check_fitted(self):
        if not hasattr(self, "patch_"):
            raise RuntimeError("attack is not fitted")

    def fit(self, X, y=None, eval_set=None):
        if self.vo is None:
            raise ValueError("an estimator needs a VO model")
        X = list(X)
        self.result_ = universal_attack(self.vo, X, X if eval_set is None else list(eval_set), self.config())
        self.patch_ = self.result_.best_patch
        return self

    def transform(self, X) -> list:
        self._check_fitted()
        return [p.composite(self.patch_) for p in prepare(list(X), self.vo, self.patch_.shape[-2:])]

    def predict(self, X) -> list:
        self._check_fitted()
        out = []
        for p in prepare(list(X), self.vo, self.patch_.shape[-2:]):
            rot, t = self.vo.motion_tensors(p.composite(self.patch_), p.gt_scales, p.inv_depth)
            out.append(cr.arrays_to_motions(rot.data, t.data))
        return out

    def score(self, X, y=None) -> float:
        self._check_fitted()
        vals = patch_losses(self.vo, list(X), self.patch_, [self.eval_criterion])
        return float(np.mean([v[CriterionKind(self.eval_criterion)] for v in vals]))


class PGDPatchAttack(UniversalPatchAttack):
    """Per-trajectory PGD; ``fit`` stores one patch per trajectory in ``patches_``."""

    def fit(self, X, y=None):
        if self.vo is None:
            raise ValueError("an estimator needs a VO model")
        self.results_ = [pgd_attack(self.vo, t, self.config()) for t in X]
        self.patches_ = [r.best_patch for r in self.results_]
        self.patch_ = self.patches_[0]
        return self

    def transform(self, X) -> list:
        self._check_fitted()
        X = list(X)
        if len(X) != len(self.patches_):
            raise ValueError("PGD patches are tied to the trajectories they were fitted on")
        return [prepare([t], self.vo, p.shape[-2:])[0].composite(p) for t, p in zip(X, self.patches_)]

    def predict(self, X) -> list:
        frames = self.transform(X)
        out = []
        for t, f in zip(X, frames):
            p = prepare([t], self.vo, self.patch_.shape[-2:])[0]
            rot, tr = self.vo.motion_tensors(f, p.gt_scales, p.inv_depth)
            out.append(cr.arrays_to_motions(rot.data, tr.data))
        return out

    def score(self, X, y=None) -> float:
        X = list(X)
        vals = [patch_losses(self.vo, [t], p, [self.eval_criterion])[0] for t, p in zip(X, self.patches_)]
        return float(np.mean([v[CriterionKind(self.eval_criterion)] for v in vals]))
