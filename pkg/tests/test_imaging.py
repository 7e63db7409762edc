import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vopatch import autodiff as ad
from vopatch import imaging as im


def shift_h(sx=1.0, tx=0.0, ty=0.0, sy=None):
    """Patch coords -> pixels with texel centers landing on pixel centers."""
    sy = sx if sy is None else sy
    return np.array([[sx, 0, tx - 0.5 * sx], [0, sy, ty - 0.5 * sy], [0, 0, 1.0]])


def frame(h, w, seed=0):
    rng = np.random.default_rng(seed)
    i0 = rng.uniform(0.0, 0.5, size=(3, h, w))
    i1 = np.minimum(1.0, i0 + rng.uniform(0.0, 0.5, size=(3, h, w)))
    return im.AlbedoPair(i0, i1, np.ones((h, w)))


def bilinear_oracle(P, x, y):
    """Zero-padded bilinear read of P at texel coordinates (x, y)."""
    c, h, w = P.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    out = np.zeros(c)
    for xi, yi in ((x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)):
        wt = (1 - abs(x - xi)) * (1 - abs(y - yi))
        if 0 <= xi < w and 0 <= yi < h:
            out += wt * P[:, yi, xi]
    return out


def test_warp_identity():
    P = np.random.default_rng(0).random((3, 6, 5))
    np.testing.assert_allclose(im.warp_patch(P, shift_h(), (6, 5)), P, atol=1e-15)


def test_warp_off_image():
    P = np.random.default_rng(0).random((3, 4, 4))
    out = im.warp_patch(P, shift_h(tx=100.0, ty=100.0), (10, 10))
    assert np.array_equal(out, np.zeros((3, 10, 10)))


def test_warp_upscale_checkerboard_oracle():
    P = np.zeros((3, 2, 2))
    P[:, 0, 0] = P[:, 1, 1] = 1.0
    H = np.diag([2.0, 2.0, 1.0])
    out = im.warp_patch(P, H, (5, 5))
    for yy in range(5):
        for xx in range(5):
            expect = bilinear_oracle(P, xx / 2.0 - 0.5, yy / 2.0 - 0.5)
            np.testing.assert_allclose(out[:, yy, xx], expect, atol=1e-15)
    # frozen value: pixel (1,1) hits texel (0,0)'s center exactly
    np.testing.assert_allclose(out[:, 1, 1], 1.0)
    np.testing.assert_allclose(out[:, 2, 2], 0.5)


def test_singular_homography():
    with pytest.raises(im.SingularHomography):
        im.warp_patch(np.zeros((3, 2, 2)), np.zeros((3, 3)), (4, 4))
    with pytest.raises(im.DimensionMismatch):
        im.warp_patch(np.zeros((3, 2, 2)), np.eye(2), (4, 4))


def test_insert_off_image_is_I0():
    f = frame(8, 9)
    out = im.insert_patch(f, np.ones((3, 4, 4)), shift_h(tx=50.0))
    assert np.array_equal(out, f.I0)


def test_insert_extremes_on_exact_region():
    f = frame(12, 14)
    out = im.insert_patch(f, np.ones((3, 4, 5)), shift_h(tx=3.0, ty=2.0))
    region = np.zeros((12, 14), dtype=bool)
    region[2:6, 3:8] = True
    np.testing.assert_allclose(out[:, region], f.I1[:, region], atol=1e-15)
    assert np.array_equal(out[:, ~region], f.I0[:, ~region])


def test_insert_midpoint():
    f = frame(6, 6)
    out = im.insert_patch(f, np.full((3, 6, 6), 0.5), shift_h())
    np.testing.assert_allclose(out, 0.5 * (f.I0 + f.I1), atol=1e-15)


def test_insert_dimension_mismatch():
    f = frame(6, 6)
    with pytest.raises(im.DimensionMismatch):
        im.insert_patch(f, np.ones((4, 2, 2)), shift_h())
    with pytest.raises(im.DimensionMismatch):
        im.AlbedoPair(np.zeros((3, 2, 2)), np.zeros((3, 2, 3)), np.zeros((2, 2)))


def test_insert_tensor_matches_numpy():
    f = frame(10, 10)
    P = np.random.default_rng(1).random((3, 4, 4))
    H = shift_h(sx=1.7, tx=1.3, ty=2.1)
    np.testing.assert_array_equal(im.insert_patch(f, ad.Tensor(P), H).data, im.insert_patch(f, P, H))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.3, 3.0), st.floats(-5, 10), st.floats(-5, 10))
def test_insert_in_unit_box(seed, scale, tx, ty):
    f = frame(12, 12, seed % 1000)
    P = np.random.default_rng(seed).random((3, 5, 5))
    out = im.insert_patch(f, P, shift_h(scale, tx, ty))
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_insert_outside_coverage_is_I0(seed):
    rng = np.random.default_rng(seed)
    i0 = rng.uniform(0, 0.5, (3, 10, 10))
    i1 = i0.copy()
    mask = np.zeros((10, 10))
    mask[2:7, 3:9] = 1.0
    i1[:, mask > 0] += 0.3
    f = im.AlbedoPair(i0, i1, mask)
    out = im.insert_patch(f, rng.random((3, 4, 4)), shift_h(rng.uniform(0.5, 3), *rng.uniform(-3, 8, 2)))
    assert np.array_equal(out[:, mask == 0], i0[:, mask == 0])


def test_shrink():
    P = np.random.default_rng(0).random((3, 8, 8))
    assert im.shrink_patch(P, 1.0) is P
    m = im.shrink_mask((8, 8), 0.5)
    assert m[:2].sum() == 0 and m[6:].sum() == 0 and m[:, :2].sum() == 0 and m[:, 6:].sum() == 0
    assert m[2:6, 2:6].min() == 1.0
    with pytest.raises(ValueError):
        im.shrink_mask((8, 8), 0.0)


def test_shrink_mask_equivalence():
    f = frame(20, 20)
    P = np.random.default_rng(3).random((3, 8, 8))
    hand = P.copy()
    hand[:, :1] = hand[:, 7:] = 0.0
    hand[:, :, :1] = hand[:, :, 7:] = 0.0
    H = shift_h(2.0, 2.0, 2.0)
    assert np.array_equal(im.insert_patch(f, im.shrink_patch(P, 0.75), H), im.insert_patch(f, hand, H))


def test_random_patch():
    assert np.array_equal(im.random_patch((4, 4), 7), im.random_patch((4, 4), 7))
    p = im.random_patch((64, 64), 0)
    assert p.shape == (3, 64, 64)
    assert abs(p.mean() - 0.5) < 0.02
    assert p.min() >= 0.0 and p.max() <= 1.0


def test_permute_patch():
    c = np.full((3, 5, 5), 0.3)
    assert np.array_equal(im.permute_patch(c, 1), c)
    P = np.random.default_rng(0).random((3, 5, 5))
    Q = im.permute_patch(P, 1)
    trip = lambda X: sorted(map(tuple, X.reshape(3, -1).T))
    assert trip(P) == trip(Q)
    assert np.array_equal(Q, im.permute_patch(P, 1))
    assert not np.array_equal(Q, P)


def test_float_image_roundtrip(tmp_path):
    img = im.to_float32_precision(np.random.default_rng(0).random((3, 7, 5)))
    im.save_float_image(tmp_path / "a.vpf", img)
    assert np.array_equal(im.load_float_image(tmp_path / "a.vpf"), img)
    (tmp_path / "b.vpf").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ValueError):
        im.load_float_image(tmp_path / "b.vpf")


def test_luminance():
    img = np.zeros((3, 2, 2))
    img[1] = 1.0
    np.testing.assert_allclose(im.luminance(img), 0.587)
    t = im.luminance(ad.Tensor(img))
    np.testing.assert_allclose(t.data, 0.587)
