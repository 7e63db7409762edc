import numpy as np
import pytest
from sklearn.base import clone

from vopatch import attacks as at
from vopatch import autodiff as ad
from vopatch import criteria as cr
from vopatch import geometry as geo
from vopatch import renderer as rd
from vopatch.criteria import CriterionKind
from vopatch.vo import DegenerateNormalEquations, DirectAlignmentVO

SPEC = rd.DatasetSpec(width=32, height=24, patch_px=(8, 8), n_groups=2, per_group=1, n_frames=4)
DIMS = (8, 8)


@pytest.fixture(scope="module")
def trajs():
    return rd.generate_dataset(rd.scene_for(SPEC), SPEC, 0)


@pytest.fixture(scope="module")
def vo():
    return DirectAlignmentVO(intrinsics=SPEC.intrinsics, gn_iterations=4)


def cfg(**kw):
    base = dict(alpha=0.05, K=4, train_criterion="rms", eval_criterion="rms", seed=1, patch_dims=DIMS)
    base.update(kw)
    return at.AttackConfig(**base)


def manual_grad(vo, traj, P, kind="rms"):
    prep = at.PreparedTrajectory(traj, vo, DIMS)

    def fn(p):
        est = vo.motion_tensors(prep.composite(p), traj.gt_scales, prep.inv_depth)
        return cr.criterion(kind)(est, cr.motions_to_arrays(traj.gt_motions))

    return ad.grad(fn, P)


def test_config_validation():
    for bad in (dict(alpha=0), dict(K=0), dict(K=1.5), dict(shrink_fraction=0.0), dict(train_criterion="x")):
        with pytest.raises(ValueError):
            cfg(**bad)
    assert cfg().to_dict()["train_criterion"] == "rms"


def test_pgd_follows_sign_ascent(vo, trajs):
    c = cfg(K=4)
    res = at.pgd_attack(vo, trajs[0], c)
    # independent re-implementation of the ascent loop
    P = np.random.default_rng(c.seed).random((3,) + DIMS)
    evals, iterates = [], [P]
    for _ in range(c.K):
        _, (g,) = manual_grad(vo, trajs[0], P)
        P = np.clip(P + c.alpha * np.sign(g), 0.0, 1.0)
        iterates.append(P)
        evals.append(manual_grad(vo, trajs[0], P)[0])
    np.testing.assert_allclose(res.eval_history, evals, rtol=1e-12)
    assert len(res.train_history) == c.K
    k = int(np.argmax(evals))
    assert res.best_iteration == k and res.best_eval_loss == pytest.approx(max(evals), rel=1e-12)
    assert np.array_equal(res.best_patch, iterates[k + 1])
    for a, b in zip(iterates, iterates[1:]):
        assert a.min() >= 0 and b.max() <= 1
        step = np.abs(b - a)
        on_lattice = np.isclose(step, c.alpha, atol=1e-12) | (step == 0) | (b == 0) | (b == 1)
        assert on_lattice.all()


def test_pgd_k1_keeps_post_step_patch(vo, trajs):
    res = at.pgd_attack(vo, trajs[0], cfg(K=1))
    assert res.best_eval_loss > 0 and res.best_iteration == 0
    P0 = at.initial_patch(cfg(K=1))
    _, (g,) = manual_grad(vo, trajs[0], P0)
    assert np.array_equal(res.best_patch, np.clip(P0 + 0.05 * np.sign(g), 0, 1))


def test_best_loss_monotone_in_K(vo, trajs):
    short = at.pgd_attack(vo, trajs[1], cfg(K=2))
    long = at.pgd_attack(vo, trajs[1], cfg(K=5))
    assert long.eval_history[:2] == short.eval_history
    assert long.best_eval_loss >= short.best_eval_loss
    assert 0.0 <= long.best_patch.min() and long.best_patch.max() <= 1.0


def test_universal_single_trajectory_equals_pgd(vo, trajs):
    c = cfg(K=5)
    p = at.pgd_attack(vo, trajs[0], c)
    u = at.universal_attack(vo, [trajs[0]], [trajs[0]], c)
    assert p.eval_history == u.eval_history
    assert p.train_history == u.train_history
    assert np.array_equal(p.best_patch, u.best_patch)


def test_duplicated_trajectory_same_signs(vo, trajs):
    c = cfg(K=3)
    single = at.universal_attack(vo, [trajs[0]], [trajs[0]], c)
    double = at.universal_attack(vo, [trajs[0], trajs[0]], [trajs[0]], c)
    assert single.eval_history == double.eval_history
    assert np.array_equal(single.best_patch, double.best_patch)


def test_summed_gradient_oracle(vo, trajs):
    P = np.random.default_rng(4).random((3,) + DIMS)
    _, (ga,) = manual_grad(vo, trajs[0], P)
    _, (gb,) = manual_grad(vo, trajs[1], P)
    preps = at.prepare(trajs, vo, DIMS)

    def total(p):
        vals = [at._losses(vo, pr, p, [CriterionKind.RMS])[CriterionKind.RMS] for pr in preps]
        return ad.add(vals[0], vals[1])

    _, (g,) = ad.grad(total, P)
    np.testing.assert_allclose(g, ga + gb, atol=1e-10, rtol=0)


def test_universal_first_step_uses_summed_signs(vo, trajs):
    c = cfg(K=1)
    res = at.universal_attack(vo, trajs, trajs, c)
    P0 = at.initial_patch(c)
    g = manual_grad(vo, trajs[0], P0)[1][0] + manual_grad(vo, trajs[1], P0)[1][0]
    assert np.array_equal(res.best_patch, np.clip(P0 + c.alpha * np.sign(g), 0, 1))


def test_invisible_patch_never_moves(vo):
    scene = rd.scene_for(SPEC)
    ts = rd.TrajectorySpec(geo.look_at([5.0, -2.0, 6.0], [5.0, 0.0, 6.0]), 1.0, 0.0, 3, 10.0)
    traj = rd.generate_trajectory(scene, ts, SPEC.intrinsics, DIMS)
    assert all(f.coverage_fraction == 0 for f in traj.frames)
    c = cfg(K=3)
    res = at.pgd_attack(vo, traj, c)
    assert np.array_equal(res.best_patch, at.initial_patch(c))
    assert len(set(res.eval_history)) == 1


def test_multi_criteria_share_iterates(vo, trajs):
    c = cfg(K=3, train_criterion="mprms")
    multi = at.pgd_attack(vo, trajs[0], c, eval_criteria=["rms", "mprms", "vo"])
    single = at.pgd_attack(vo, trajs[0], cfg(K=3, train_criterion="mprms", eval_criterion="vo"))
    assert set(multi) == set(CriterionKind)
    assert multi[CriterionKind.VO].eval_history == single.eval_history
    assert multi[CriterionKind.RMS].train_history == multi[CriterionKind.VO].train_history


def test_shrunk_patch_is_inert_outside(vo, trajs):
    c = cfg(K=2, shrink_fraction=0.5)
    res = at.universal_attack(vo, trajs, trajs, c)
    mask = at.shrink_mask(DIMS, 0.5)
    assert np.all(res.best_patch[:, mask == 0] == 0)
    assert np.any(res.best_patch[:, mask == 1] > 0)


class FailingVO(DirectAlignmentVO):
    fail_after = 3

    def motion_tensors(self, frames, gt_scales=None, inv_depth=None):
        self.calls = getattr(self, "calls", 0) + 1
        if self.calls > self.fail_after:
            raise DegenerateNormalEquations("forced", pair_index=0)
        return super().motion_tensors(frames, gt_scales, inv_depth)


def test_failure_keeps_best_so_far(trajs):
    vo = FailingVO(intrinsics=SPEC.intrinsics, gn_iterations=4)
    res = at.pgd_attack(vo, trajs[0], cfg(K=10))
    assert res.error is not None and "forced" in res.error
    assert len(res.eval_history) == 2
    assert res.best_eval_loss == max(res.eval_history)


def test_universal_needs_data(vo):
    with pytest.raises(ValueError):
        at.universal_attack(vo, [], [], cfg())


def test_result_roundtrip(vo, trajs, tmp_path):
    res = at.pgd_attack(vo, trajs[0], cfg(K=3))
    res.save(tmp_path, "p")
    back = at.AttackResult.load(tmp_path, "p")
    assert np.array_equal(back.best_patch, res.best_patch.astype(np.float32).astype(np.float64))
    assert back.eval_history == res.eval_history and back.train_history == res.train_history
    assert back.best_eval_loss == res.best_eval_loss and back.best_iteration == res.best_iteration


def test_estimators(vo, trajs):
    est = at.UniversalPatchAttack(vo=vo, K=2, patch_dims=DIMS, seed=1)
    assert clone(est).get_params()["K"] == 2
    with pytest.raises(RuntimeError):
        est.transform(trajs)
    est.fit(trajs)
    frames = est.transform(trajs)
    assert frames[0].shape == (SPEC.n_frames, 3, SPEC.height, SPEC.width)
    assert len(est.predict(trajs)[0]) == SPEC.n_frames - 1
    assert est.score(trajs) == pytest.approx(est.result_.best_eval_loss / len(trajs), rel=1e-12)
    pgd = at.PGDPatchAttack(vo=vo, K=2, patch_dims=DIMS, seed=1).fit(trajs)
    assert len(pgd.patches_) == 2
    with pytest.raises(ValueError):
        pgd.transform(trajs[:1])
    assert pgd.score(trajs) == pytest.approx(np.mean([r.best_eval_loss for r in pgd.results_]), rel=1e-12)


def test_prefix_deviations_shape(vo, trajs):
    dev = at.prefix_deviations(vo, trajs, np.zeros((3,) + DIMS))
    assert dev.shape == (2, SPEC.n_frames - 1)
    vals = at.patch_losses(vo, trajs, np.zeros((3,) + DIMS))
    np.testing.assert_allclose(dev[:, -1], [v[CriterionKind.VO] for v in vals], rtol=1e-12)
