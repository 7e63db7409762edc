import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vopatch import autodiff as ad
from vopatch import geometry as geo
from vopatch.vo import se3_exp_tensor


def fd_check(fn, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    _, (g,) = ad.grad(fn, x)
    fd = ad.finite_difference(lambda v: float(fn(ad.Tensor(v)).data), x, np.arange(x.size), h)
    return ad.relative_error(g.reshape(-1), fd)


def test_l2_norm_value():
    assert ad.l2_norm(ad.Tensor([3.0, 4.0])).item() == 5.0


def test_sqrt_gradient():
    _, (g,) = ad.grad(ad.sqrt, np.array(4.0))
    assert g == 0.25


def test_composite_expression():
    rng = np.random.default_rng(0)
    b, c = rng.normal(size=5), rng.normal(size=5)
    assert fd_check(lambda a: ad.l2_norm(ad.sub(ad.mul(a, b), c)), rng.normal(size=5)) < 1e-4


def test_sum_and_square_gradients():
    P = np.random.default_rng(1).normal(size=(3, 4))
    _, (g,) = ad.grad(ad.sum, P)
    assert np.array_equal(g, np.ones_like(P))
    _, (g,) = ad.grad(lambda t: ad.sum(ad.square(t)), P)
    np.testing.assert_array_equal(g, 2 * P)


@pytest.mark.parametrize("x,expected", [(0.5, 1.0), (1.5, 0.0), (1.0, 0.0), (0.0, 0.0), (-0.2, 0.0)])
def test_clamp_convention(x, expected):
    _, (g,) = ad.grad(lambda t: ad.clamp(t, 0.0, 1.0), np.array(x))
    assert g == expected


def test_errors():
    with pytest.raises(ad.ShapeMismatch):
        ad.add(ad.Tensor(np.ones(3)), np.ones(4))
    with pytest.raises(ad.ShapeMismatch):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    leaf = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        vec = ad.mul(leaf, 2.0)
    with pytest.raises(ad.NonScalarOutput):
        ad.backward(tape, vec)
    with ad.Tape() as other:
        out = ad.sum(ad.mul(leaf, 3.0))
    with pytest.raises(ad.NotOnTape):
        ad.backward(tape, out)
    ad.backward(other, out)
    with pytest.raises(RuntimeError):
        ad.backward(other, out)


def test_forward_values_match_numpy():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ta, tb = ad.Tensor(a), ad.Tensor(b)
    assert np.array_equal(ad.add(ta, tb).data, a + b)
    assert np.array_equal(ad.sub(ta, tb).data, a - b)
    assert np.array_equal(ad.mul(ta, tb).data, a * b)
    assert np.array_equal(ad.square(ta).data, a * a)
    assert np.array_equal(ad.sqrt(ad.Tensor(np.abs(a))).data, np.sqrt(np.abs(a)))
    assert np.array_equal(ad.sum(ta, axis=1).data, a.sum(axis=1))
    assert np.array_equal(ad.mean(ta).data, a.mean())
    assert np.array_equal(ad.clamp(ta, -0.3, 0.3).data, np.clip(a, -0.3, 0.3))
    assert np.array_equal(ad.concat([ta, tb], axis=1).data, np.concatenate([a, b], axis=1))
    assert np.array_equal(ad.matmul(ta, ad.Tensor(b.T)).data, a @ b.T)


def test_registered_ops_match_finite_differences():
    errs = ad.check_ops(seed=0)
    assert len(errs) >= 20
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-4, worst


def test_sample_xy_coordinate_gradient():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(1, 6, 7))
    x = rng.uniform(0.6, 5.4, size=(1, 8))
    y = rng.uniform(0.6, 4.4, size=(1, 8))
    x = np.where(np.abs(x - np.round(x)) < 0.05, x + 0.1, x)
    y = np.where(np.abs(y - np.round(y)) < 0.05, y + 0.1, y)
    assert fd_check(lambda t: ad.sum(ad.sample_xy(img, t, y)), x, h=1e-6) < 1e-4
    assert fd_check(lambda t: ad.sum(ad.sample_xy(img, x, t)), y, h=1e-6) < 1e-4


def test_se3_exp_tensor_matches_geometry():
    rng = np.random.default_rng(4)
    xi = np.vstack([rng.normal(size=(3, 6)), np.array([[0.1, 0.2, 0.3, 1e-9, 0, 0]])])
    rot, t = se3_exp_tensor(ad.Tensor(xi))
    for k in range(xi.shape[0]):
        m = geo.se3_exp(xi[k])
        np.testing.assert_allclose(rot.data[k], m.R, atol=1e-12)
        np.testing.assert_allclose(t.data[k], m.translation, atol=1e-12)


def test_se3_exp_tensor_gradient_near_zero():
    xi = np.array([[0.1, -0.2, 0.3, 1e-4, -2e-4, 5e-5], [0.1, 0.0, -0.1, 0.3, 0.2, -0.4]])
    def fn(t):
        rot, tr = se3_exp_tensor(t)
        return ad.add(ad.sum(ad.mul(rot, np.arange(18.0).reshape(2, 3, 3))), ad.sum(ad.square(tr)))
    assert fd_check(fn, xi, h=1e-6) < 1e-4


def test_backward_deterministic():
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(6, 7))
    sampler = ad.BilinearSampler(rng.uniform(0, 7, 30), rng.uniform(0, 6, 30), (6, 7))
    fn = lambda t: ad.l2_norm(ad.sub(ad.bilinear_sample(t, sampler), 0.3))
    g1 = ad.grad(fn, img)[1][0]
    g2 = ad.grad(fn, img)[1][0]
    assert np.array_equal(g1, g2)


def test_sampler_vstack():
    rng = np.random.default_rng(6)
    s1 = ad.BilinearSampler(rng.uniform(0, 5, 7), rng.uniform(0, 4, 7), (4, 5))
    s2 = ad.BilinearSampler(rng.uniform(0, 5, 3), rng.uniform(0, 4, 3), (4, 5))
    img = rng.uniform(size=(2, 4, 5))
    both = ad.BilinearSampler.vstack([s1, s2])
    assert np.array_equal(both.apply(img), np.concatenate([s1.apply(img), s2.apply(img)], axis=-1))
    with pytest.raises(ad.ShapeMismatch):
        ad.BilinearSampler.vstack([s1, ad.BilinearSampler([0.0], [0.0], (3, 3))])


shapes = hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=4)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, shapes, elements=st.floats(-3, 3)), st.integers(0, 1000))
def test_broadcast_product_gradient(a, seed):
    b = np.random.default_rng(seed).normal(size=a.shape[-1:])
    _, (ga,) = ad.grad(lambda t: ad.sum(ad.mul(t, b)), a)
    np.testing.assert_array_equal(ga, np.broadcast_to(b, a.shape))
    _, (gb,) = ad.grad(lambda t: ad.sum(ad.mul(a, t)), b)
    np.testing.assert_allclose(gb, a.reshape(-1, a.shape[-1]).sum(axis=0), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=st.floats(0.1, 3)), hnp.arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_gradient_of_sum_is_sum_of_gradients(x, y):
    f = lambda t: ad.sum(ad.sqrt(t))
    g = lambda t: ad.l2_norm(ad.sub(t, y))
    _, (gf,) = ad.grad(f, x)
    _, (gg,) = ad.grad(g, x)
    _, (gs,) = ad.grad(lambda t: ad.add(f(t), g(t)), x)
    np.testing.assert_allclose(gs, gf + gg, atol=1e-12)
